import numpy as np
import pytest
from scipy import ndimage

from icseg.data import (
    IDENTITY_AUGMENT,
    AugmentConfig,
    BadSpec,
    Dataset,
    MixtureSpec,
    NoPartner,
    SamplerConfig,
    ShapeGenConfig,
    augment,
    build_training_draw,
    category_map,
    gen_shapes_sample,
    gen_shapes_sequence,
    load_dataset,
    mixture_sampler,
    pick_dataset,
    rasterize,
    sample_context_partner,
    sample_scene,
    save_dataset,
    worker_rng,
)
from icseg.palette import CATEGORY, INSTANCE, recolor


def small_spec(**kw):
    return ShapeGenConfig(size=32, **kw)


def make_pool(n, seed=0, spec=None):
    spec = spec or small_spec()
    rng = np.random.default_rng(seed)
    return [gen_shapes_sample(spec, rng, tag="pool") for _ in range(n)]


def test_single_ellipse_sample_ids():
    spec = small_spec(n_shapes=(1, 1), shapes=("ellipse",))
    s = gen_shapes_sample(spec, np.random.default_rng(0))
    assert s.map.id_set() == {1}
    assert set(np.unique(category_map(s).ids)) == {0, spec.category_of("ellipse")}


def test_gen_shapes_deterministic():
    spec = small_spec()
    a = gen_shapes_sample(spec, np.random.default_rng(5))
    b = gen_shapes_sample(spec, np.random.default_rng(5))
    assert (a.source == b.source).all() and a.map == b.map


def test_bad_spec_rejected():
    with pytest.raises(BadSpec):
        ShapeGenConfig(size=0)
    with pytest.raises(BadSpec):
        ShapeGenConfig(shapes=())


def test_map_matches_shape_rasterization_exactly():
    # Oracle: re-rasterize each shape and re-apply occlusion by hand; the
    # visible region must coincide with the map region pixel for pixel.
    spec = small_spec(n_shapes=(3, 3))
    rng = np.random.default_rng(7)
    background, shapes = sample_scene(spec, rng)
    from icseg.data import render_scene

    sample = render_scene(background, shapes, spec)
    for idx, shape in enumerate(shapes, start=1):
        visible = rasterize(shape, spec.size)
        for later in shapes[idx:]:
            visible &= ~rasterize(later, spec.size)
        region = sample.map.ids == idx
        inter = (visible & region).sum()
        union = (visible | region).sum()
        assert union == 0 or inter / union == 1.0


def test_sequence_first_frame_matches_still():
    spec = small_spec()
    still = gen_shapes_sample(spec, np.random.default_rng(3))
    video = gen_shapes_sequence(spec, 5, np.random.default_rng(3))
    assert (video.frames[0].source == still.source).all()
    assert video.frames[0].map == still.map


def test_sequence_single_frame_and_zero_velocity():
    spec = small_spec(max_speed=0.0)
    video = gen_shapes_sequence(spec, 4, np.random.default_rng(1))
    for f in video.frames[1:]:
        assert (f.source == video.frames[0].source).all()
        assert f.map == video.frames[0].map
    single = gen_shapes_sequence(spec, 1, np.random.default_rng(1))
    assert len(single) == 1


def test_sequence_ids_persist():
    spec = small_spec(n_shapes=(2, 3), shape_frac=(0.3, 0.4))
    video = gen_shapes_sequence(spec, 8, np.random.default_rng(9))
    id_sets = [f.map.id_set() for f in video.frames]
    assert all(s == id_sets[0] for s in id_sets)


def test_augment_flip_involution():
    s = gen_shapes_sample(small_spec(), np.random.default_rng(2))
    cfg = AugmentConfig(crop_scale=(1.0, 1.0), p_flip=1.0, gain=(1.0, 1.0), bias=(0.0, 0.0))
    once = augment(s, np.random.default_rng(0), cfg)
    twice = augment(once, np.random.default_rng(1), cfg)
    assert (twice.source == s.source).all() and twice.map == s.map


def test_augment_never_creates_ids():
    s = gen_shapes_sample(small_spec(n_shapes=(2, 3)), np.random.default_rng(4))
    for seed in range(25):
        out = augment(s, np.random.default_rng(seed))
        assert out.map.id_set() <= s.map.id_set()
        assert set(out.categories) == out.map.id_set()


def boundary_distance(mask_a, mask_b):
    """Mean symmetric distance between mask boundaries, in pixels."""
    edge = lambda m: m ^ ndimage.binary_erosion(m, border_value=0)
    ea, eb = edge(mask_a), edge(mask_b)
    if not ea.any() or not eb.any():
        return 0.0
    da = ndimage.distance_transform_edt(~eb)[ea]
    db = ndimage.distance_transform_edt(~ea)[eb]
    return float(np.concatenate([da, db]).mean())


def test_augment_keeps_map_aligned_with_source():
    # High-contrast single shape; after crop+resize the color edge in the
    # source must stay within a pixel of the map edge.
    spec = ShapeGenConfig(
        size=48, n_shapes=(1, 1), shapes=("rectangle",), shape_frac=(0.45, 0.55), background_noise=0
    )
    cfg = AugmentConfig(crop_scale=(0.7, 0.9), p_flip=0.5, gain=(1.0, 1.0), bias=(0.0, 0.0))
    for seed in range(10):
        s = gen_shapes_sample(spec, np.random.default_rng(seed))
        out = augment(s, np.random.default_rng(seed + 100), cfg)
        if not out.map.id_set():
            continue
        shape_color = np.array(s.source[s.map.ids == 1][0], dtype=np.int32)
        dist = np.abs(out.source.astype(np.int32) - shape_color).sum(axis=2)
        source_mask = dist < 120
        map_mask = out.map.ids == 1
        assert boundary_distance(source_mask, map_mask) < 1.0


def test_partner_instance_kind_keeps_id_set():
    pool = make_pool(4)
    anchor = pool[0]
    for seed in range(10):
        partner = sample_context_partner(pool, anchor, INSTANCE, 0.5, np.random.default_rng(seed))
        # Views crop, so partner ids are a subset of the anchor's.
        assert partner.map.id_set() <= anchor.map.id_set()


def test_partner_p_view_one_returns_transform_of_anchor():
    pool = make_pool(4)
    anchor = pool[1]
    partner = sample_context_partner(pool, anchor, CATEGORY, 1.0, np.random.default_rng(3))
    assert partner.map.id_set() <= anchor.map.id_set()
    assert partner.categories.items() <= anchor.categories.items()


def test_partner_p_view_zero_unique_sharing_sample():
    spec = small_spec(n_shapes=(1, 1))
    rng = np.random.default_rng(0)
    ellipse_a = gen_shapes_sample(ShapeGenConfig(size=32, n_shapes=(1, 1), shapes=("ellipse",)), rng)
    ellipse_b = gen_shapes_sample(ShapeGenConfig(size=32, n_shapes=(1, 1), shapes=("ellipse",)), rng)
    triangle = gen_shapes_sample(ShapeGenConfig(size=32, n_shapes=(1, 1), shapes=("triangle",)), rng)
    pool = [ellipse_a, ellipse_b, triangle]
    got = sample_context_partner(pool, ellipse_a, CATEGORY, 0.0, np.random.default_rng(1))
    assert got is ellipse_b


def test_partner_no_partner_raises_without_fallback():
    rng = np.random.default_rng(0)
    ellipse = gen_shapes_sample(ShapeGenConfig(size=32, n_shapes=(1, 1), shapes=("ellipse",)), rng)
    triangle = gen_shapes_sample(ShapeGenConfig(size=32, n_shapes=(1, 1), shapes=("triangle",)), rng)
    with pytest.raises(NoPartner):
        sample_context_partner([ellipse, triangle], ellipse, CATEGORY, 0.0, np.random.default_rng(1), fallback_to_view=False)
    # Default falls back to a transformed view.
    got = sample_context_partner([ellipse, triangle], ellipse, CATEGORY, 0.0, np.random.default_rng(1))
    assert got.map.id_set() <= ellipse.map.id_set()


def test_mixture_spec_validation():
    with pytest.raises(BadSpec):
        MixtureSpec(weights=(("a", 0.6), ("b", 0.6)))
    MixtureSpec(weights=(("a", 0.5), ("b", 0.5)), p_view=0.5)


def test_mixture_appendix_shaped_weights_accepted():
    # Ten datasets with the published weight profile, normalized to sum 1.
    raw = [0.22, 0.15, 0.15, 0.07, 0.07, 0.07, 0.07, 0.07, 0.06, 0.06]
    total = sum(raw)
    weights = tuple((f"d{i}", w / total) for i, w in enumerate(raw))
    spec = MixtureSpec(weights=weights)
    assert len(spec.tags()) == 10


def test_single_weight_draws_only_that_dataset():
    spec = MixtureSpec(weights=(("a", 1.0),))
    rng = np.random.default_rng(0)
    assert all(pick_dataset(spec, rng) == "a" for _ in range(100))


def test_pick_dataset_frequencies_match_weights():
    spec = MixtureSpec(weights=(("a", 0.5), ("b", 0.3), ("c", 0.2)))
    rng = np.random.default_rng(123)
    n = 100_000
    counts = {"a": 0, "b": 0, "c": 0}
    for _ in range(n):
        counts[pick_dataset(spec, rng)] += 1
    for tag, w in spec.weights:
        assert abs(counts[tag] / n - w) < 0.01
        # also within 3 sigma of multinomial noise
        sigma = (w * (1 - w) / n) ** 0.5
        assert abs(counts[tag] / n - w) < 3 * sigma + 1e-12


def make_datasets(seed=0, n=6):
    spec = ShapeGenConfig(size=32)
    rng = np.random.default_rng(seed)
    return {
        "shapes_cat": Dataset("shapes_cat", CATEGORY, [gen_shapes_sample(spec, rng, "shapes_cat") for _ in range(n)]),
        "shapes_inst": Dataset("shapes_inst", INSTANCE, [gen_shapes_sample(spec, rng, "shapes_inst") for _ in range(n)]),
    }


def test_mixture_sampler_emits_valid_canvases():
    datasets = make_datasets()
    spec = MixtureSpec(weights=(("shapes_cat", 0.5), ("shapes_inst", 0.5)))
    cfg = SamplerConfig(image_size=32, patch=8)
    stream = mixture_sampler(spec, datasets, np.random.default_rng(0), cfg)
    for i in range(1000):
        draw = next(stream)
        canvas = draw.canvas
        assert canvas.pixels.shape == (64, 64, 3)
        r0, r1, c0, c1 = canvas.query_target_patch_bounds()
        outside = canvas.mask_plan.copy()
        outside[r0:r1, c0:c1] = False
        assert not outside.any()
        assert draw.palette.min_distance() >= 64.0
        assert draw.task_kind in (CATEGORY, INSTANCE)
        # Full pixel-set scan of the target quadrant on a subsample.
        if i % 10 == 0:
            allowed = {draw.palette.background} | set(draw.palette.entries.values())
            qt = canvas.quadrant(1, 1).reshape(-1, 3)
            assert {tuple(int(v) for v in c) for c in qt} <= allowed


def test_mixture_sampler_unresolvable_tag():
    datasets = make_datasets()
    spec = MixtureSpec(weights=(("missing", 1.0),))
    with pytest.raises(BadSpec):
        next(mixture_sampler(spec, datasets, np.random.default_rng(0)))


def test_mixture_sampler_deterministic():
    spec = MixtureSpec(weights=(("shapes_cat", 0.5), ("shapes_inst", 0.5)))
    cfg = SamplerConfig(image_size=32, patch=8)
    a = [next(mixture_sampler(MixtureSpec(spec.weights), make_datasets(), np.random.default_rng(7), cfg)) for _ in range(1)]
    b = [next(mixture_sampler(MixtureSpec(spec.weights), make_datasets(), np.random.default_rng(7), cfg)) for _ in range(1)]
    assert (a[0].canvas.pixels == b[0].canvas.pixels).all()
    assert (a[0].canvas.mask_plan == b[0].canvas.mask_plan).all()


def test_worker_rng_streams_differ():
    a = worker_rng(0, 0).integers(0, 1 << 30, size=8)
    b = worker_rng(0, 1).integers(0, 1 << 30, size=8)
    assert not np.array_equal(a, b)


def test_dataset_roundtrip(tmp_path):
    datasets = make_datasets(n=3)
    ds = datasets["shapes_inst"]
    save_dataset(ds, tmp_path)
    loaded = load_dataset(tmp_path, "shapes_inst")
    assert loaded.kind == ds.kind and len(loaded.samples) == 3
    for a, b in zip(ds.samples, loaded.samples):
        assert (a.source == b.source).all()
        assert a.map == b.map
        assert a.categories == b.categories
