"""Synthetic labeled data: procedural shape scenes and moving-shape videos,
augmentation, context-partner sampling per task type, and weighted mixture
sampling that emits training canvases on the fly."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import pngio
from .palette import (
    CATEGORY,
    INSTANCE,
    Canvas,
    InContextPair,
    Palette,
    SegmentMap,
    build_canvas,
    make_incontext_pair,
    mix_context,
    recolor,
    sample_palette,
)

SHAPE_KINDS = ("ellipse", "rectangle", "triangle")
# Loose color band per shape category so the toy task is learnable at small
# scale: category identity correlates with appearance, never with target color.
SHAPE_COLOR_RANGES: dict[str, tuple[tuple[int, int], tuple[int, int], tuple[int, int]]] = {
    "ellipse": ((150, 255), (20, 110), (20, 110)),
    "rectangle": ((20, 110), (150, 255), (20, 110)),
    "triangle": ((20, 110), (20, 110), (150, 255)),
}


class BadSpec(ValueError):
    pass


class NoPartner(RuntimeError):
    pass


@dataclass
class LabeledSample:
    """An RGB image with an instance-level segment map and per-id categories."""

    source: np.ndarray
    map: SegmentMap
    categories: dict[int, int]
    dataset_tag: str = ""

    def __post_init__(self):
        if self.source.shape[:2] != self.map.ids.shape:
            raise BadSpec("source and map dimensions must match")
        missing = self.map.id_set() - set(self.categories)
        if missing:
            raise BadSpec(f"ids without category labels: {sorted(missing)}")

    def category_ids(self) -> set[int]:
        return {self.categories[i] for i in self.map.id_set()}


@dataclass
class VideoSample:
    """Ordered frames with instance ids stable across time."""

    frames: list[LabeledSample]

    def __post_init__(self):
        if not self.frames:
            raise BadSpec("video needs at least one frame")
        shapes = {f.source.shape for f in self.frames}
        if len(shapes) != 1:
            raise BadSpec("all frames must share dimensions")

    def __len__(self) -> int:
        return len(self.frames)


def category_map(sample: LabeledSample) -> SegmentMap:
    """Relabel instance ids to category ids."""
    max_id = int(sample.map.ids.max(initial=0))
    lut = np.zeros(max_id + 1, dtype=np.int32)
    for inst, cat in sample.categories.items():
        if inst <= max_id:
            lut[inst] = cat
    return SegmentMap(lut[sample.map.ids], CATEGORY)


def map_for_kind(sample: LabeledSample, kind: str) -> SegmentMap:
    return category_map(sample) if kind == CATEGORY else sample.map


@dataclass(frozen=True)
class ShapeGenConfig:
    """Procedural shape-scene generator parameters."""

    size: int = 64
    n_shapes: tuple[int, int] = (1, 3)
    shapes: tuple[str, ...] = SHAPE_KINDS
    shape_frac: tuple[float, float] = (0.30, 0.60)
    background_gray: tuple[int, int] = (90, 160)
    background_noise: int = 12
    max_speed: float = 1.5
    # Per-frame relative size change for videos (0 = rigid shapes).
    max_scale_rate: float = 0.0
    # Per-shape-kind RGB ranges; None uses the module defaults.
    color_ranges: dict[str, tuple[tuple[int, int], tuple[int, int], tuple[int, int]]] | None = None
    # Probability that same-kind shapes in a scene share one color: forces
    # instance discrimination by position rather than appearance.
    p_twin: float = 0.0
    # Resample the background noise field every video frame (sensor-style
    # flicker).  Off by default so zero-velocity videos stay identical.
    background_flicker: bool = False

    def __post_init__(self):
        if self.size <= 0:
            raise BadSpec("size must be positive")
        if not self.shapes:
            raise BadSpec("shape vocabulary must not be empty")
        unknown = set(self.shapes) - set(SHAPE_KINDS)
        if unknown:
            raise BadSpec(f"unknown shapes: {sorted(unknown)}")
        if not (0 < self.n_shapes[0] <= self.n_shapes[1]):
            raise BadSpec("n_shapes range must be positive and ordered")

    def category_of(self, shape: str) -> int:
        return SHAPE_KINDS.index(shape) + 1


@dataclass(frozen=True)
class Shape:
    """One placed shape: geometry, appearance, per-video motion.

    vx/vy translate the center per frame; vs rescales width and height by
    (1 + vs * t), keeping the center fixed.
    """

    kind: str
    x: float
    y: float
    w: float
    h: float
    color: tuple[int, int, int]
    vx: float = 0.0
    vy: float = 0.0
    vs: float = 0.0


def rasterize(shape: Shape, size: int, t: int = 0) -> np.ndarray:
    """Boolean mask of a shape at frame t under its translation and scale."""
    scale = max(1.0 + shape.vs * t, 0.05)
    w = shape.w * scale
    h = shape.h * scale
    cx = shape.x + shape.w / 2 + t * shape.vx
    cy = shape.y + shape.h / 2 + t * shape.vy
    x = cx - w / 2
    y = cy - h / 2
    im = Image.new("L", (size, size), 0)
    d = ImageDraw.Draw(im)
    box = [round(x), round(y), round(x + w), round(y + h)]
    if shape.kind == "ellipse":
        d.ellipse(box, fill=255)
    elif shape.kind == "rectangle":
        d.rectangle(box, fill=255)
    elif shape.kind == "triangle":
        d.polygon(
            [
                (round(x + w / 2), round(y)),
                (round(x), round(y + h)),
                (round(x + w), round(y + h)),
            ],
            fill=255,
        )
    else:
        raise BadSpec(f"unknown shape kind {shape.kind!r}")
    return np.asarray(im) > 0


def _sample_background(spec: ShapeGenConfig, rng: np.random.Generator) -> np.ndarray:
    base = int(rng.integers(*spec.background_gray))
    noise = rng.integers(-spec.background_noise, spec.background_noise + 1, size=(spec.size, spec.size, 1))
    return np.clip(base + noise, 0, 255).astype(np.uint8).repeat(3, axis=2)


def sample_scene(spec: ShapeGenConfig, rng: np.random.Generator) -> tuple[np.ndarray, list[Shape]]:
    """Draw a background and a list of shapes (zero velocity)."""
    background = _sample_background(spec, rng)
    ranges = spec.color_ranges or SHAPE_COLOR_RANGES
    n = int(rng.integers(spec.n_shapes[0], spec.n_shapes[1] + 1))
    shapes = []
    for _ in range(n):
        kind = str(rng.choice(spec.shapes))
        w = float(rng.uniform(*spec.shape_frac)) * spec.size
        h = float(rng.uniform(*spec.shape_frac)) * spec.size
        x = float(rng.uniform(0, spec.size - w - 1))
        y = float(rng.uniform(0, spec.size - h - 1))
        color = tuple(int(rng.integers(*ranges[kind][c])) for c in range(3))
        shapes.append(Shape(kind, x, y, w, h, color))
    if spec.p_twin and len(shapes) > 1 and rng.random() < spec.p_twin:
        first_of_kind: dict[str, tuple[int, int, int]] = {}
        shapes = [
            replace(s, color=first_of_kind.setdefault(s.kind, s.color))
            for s in shapes
        ]
    return background, shapes


def render_scene(
    background: np.ndarray,
    shapes: Sequence[Shape],
    spec: ShapeGenConfig,
    t: int = 0,
    tag: str = "",
) -> LabeledSample:
    """Paint shapes over the background in order; later shapes occlude."""
    source = background.copy()
    ids = np.zeros((spec.size, spec.size), dtype=np.int32)
    categories: dict[int, int] = {}
    for idx, shape in enumerate(shapes, start=1):
        mask = rasterize(shape, spec.size, t)
        source[mask] = shape.color
        ids[mask] = idx
        categories[idx] = spec.category_of(shape.kind)
    return LabeledSample(source, SegmentMap(ids, INSTANCE), categories, tag)


def gen_shapes_sample(spec: ShapeGenConfig, rng: np.random.Generator, tag: str = "") -> LabeledSample:
    background, shapes = sample_scene(spec, rng)
    return render_scene(background, shapes, spec, tag=tag)


def gen_shapes_sequence(
    spec: ShapeGenConfig, frames: int, rng: np.random.Generator, tag: str = ""
) -> VideoSample:
    """Moving-shape video: constant per-shape velocity, ids stable.

    Frame 0 matches gen_shapes_sample with the same rng state.  Velocities
    are clipped so no shape exits the frame within `frames` steps.
    """
    if frames < 1:
        raise BadSpec("frame count must be >= 1")
    background, shapes = sample_scene(spec, rng)
    steps = max(frames - 1, 1)
    backgrounds = [background]
    if spec.background_flicker:
        backgrounds += [_sample_background(spec, rng) for _ in range(frames - 1)]
    moving = []
    for s in shapes:
        vx = float(rng.uniform(-spec.max_speed, spec.max_speed))
        vy = float(rng.uniform(-spec.max_speed, spec.max_speed))
        vs = float(rng.uniform(-spec.max_scale_rate, spec.max_scale_rate)) if spec.max_scale_rate else 0.0
        # Growth at the final frame must still fit the frame; shrink is safe.
        if vs > 0:
            limit = (spec.size - 2) / max(s.w, s.h)
            vs = min(vs, (limit - 1) / steps)
        margin = (max(s.w, s.h) * max(vs, 0.0) * steps) / 2
        vx = float(np.clip(vx, (margin - s.x) / steps, (spec.size - 1 - s.w - s.x - margin) / steps))
        vy = float(np.clip(vy, (margin - s.y) / steps, (spec.size - 1 - s.h - s.y - margin) / steps))
        moving.append(replace(s, vx=vx, vy=vy, vs=vs))
    return VideoSample(
        [
            render_scene(backgrounds[t] if spec.background_flicker else background, moving, spec, t=t, tag=tag)
            for t in range(frames)
        ]
    )


@dataclass(frozen=True)
class AugmentConfig:
    """Random resize crop + horizontal flip + per-channel color jitter."""

    crop_scale: tuple[float, float] = (0.6, 1.0)
    p_flip: float = 0.5
    gain: tuple[float, float] = (0.8, 1.2)
    bias: tuple[float, float] = (-16.0, 16.0)
    out_size: int | None = None  # None keeps the input size


IDENTITY_AUGMENT = AugmentConfig(crop_scale=(1.0, 1.0), p_flip=0.0, gain=(1.0, 1.0), bias=(0.0, 0.0))


def augment(
    sample: LabeledSample,
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
) -> LabeledSample:
    """Geometric transforms hit source and map identically (nearest neighbor
    for the map); color jitter touches the source only."""
    h, w = sample.map.ids.shape
    out_size = cfg.out_size or h

    scale = float(rng.uniform(*cfg.crop_scale))
    ch = max(1, round(scale * h))
    cw = max(1, round(scale * w))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    src = sample.source[y0 : y0 + ch, x0 : x0 + cw]
    ids = sample.map.ids[y0 : y0 + ch, x0 : x0 + cw]

    if rng.random() < cfg.p_flip:
        src = src[:, ::-1]
        ids = ids[:, ::-1]

    if (ch, cw) != (out_size, out_size):
        src = np.asarray(Image.fromarray(src).resize((out_size, out_size), Image.BILINEAR))
        ids = np.asarray(
            Image.fromarray(ids.astype(np.int32), mode="I").resize((out_size, out_size), Image.NEAREST),
            dtype=np.int32,
        )

    gain = rng.uniform(*cfg.gain, size=3)
    bias = rng.uniform(*cfg.bias, size=3)
    src = np.clip(src.astype(np.float32) * gain + bias, 0, 255).astype(np.uint8)

    segmap = SegmentMap(np.ascontiguousarray(ids), sample.map.kind)
    categories = {i: sample.categories[i] for i in segmap.id_set()}
    return LabeledSample(src, segmap, categories, sample.dataset_tag)


def _pool_candidates(pool: Sequence[LabeledSample], anchor: LabeledSample) -> list[LabeledSample]:
    anchor_cats = anchor.category_ids()
    return [s for s in pool if s is not anchor and anchor_cats & s.category_ids()]


def sample_context_partner(
    pool: Sequence[LabeledSample],
    anchor: LabeledSample,
    kind: str,
    p_view: float,
    rng: np.random.Generator,
    *,
    aug: AugmentConfig = AugmentConfig(),
    fallback_to_view: bool = True,
) -> LabeledSample:
    """Pick the in-context partner for an anchor.

    Instance tasks always use a transformed view of the anchor.  Category
    tasks use a view with probability p_view, otherwise a pool sample that
    shares at least one category; if none exists, fall back to a view (or
    raise NoPartner when the fallback is disabled).
    """
    if not pool:
        raise NoPartner("empty pool")
    if kind == INSTANCE or rng.random() < p_view:
        return augment(anchor, rng, aug)
    candidates = _pool_candidates(pool, anchor)
    if not candidates:
        if fallback_to_view:
            return augment(anchor, rng, aug)
        raise NoPartner("no pool sample shares a category with the anchor")
    return candidates[int(rng.integers(len(candidates)))]


@dataclass
class Dataset:
    """A tagged pool of samples plus the task type they train."""

    tag: str
    kind: str
    samples: list[LabeledSample]

    def __post_init__(self):
        if self.kind not in (CATEGORY, INSTANCE):
            raise BadSpec(f"dataset kind must be category or instance, got {self.kind!r}")
        if not self.samples:
            raise BadSpec(f"dataset {self.tag!r} is empty")


@dataclass(frozen=True)
class MixtureSpec:
    """Sampling weights over dataset tags, plus the transformed-view
    probability used for category (semantic-style) tasks."""

    weights: tuple[tuple[str, float], ...]
    p_view: float = 0.5

    def __post_init__(self):
        total = sum(w for _, w in self.weights)
        if abs(total - 1.0) > 1e-9:
            raise BadSpec(f"mixture weights must sum to 1, got {total}")
        if any(w < 0 for _, w in self.weights):
            raise BadSpec("mixture weights must be non-negative")
        if not 0.0 <= self.p_view <= 1.0:
            raise BadSpec("p_view must lie in [0, 1]")

    def tags(self) -> list[str]:
        return [t for t, _ in self.weights]


def pick_dataset(spec: MixtureSpec, rng: np.random.Generator) -> str:
    tags = [t for t, _ in spec.weights]
    probs = np.array([w for _, w in spec.weights])
    return tags[int(rng.choice(len(tags), p=probs / probs.sum()))]


@dataclass
class TrainingDraw:
    """One training example: a masked canvas plus its task metadata."""

    canvas: Canvas
    task_kind: str
    dataset_tag: str
    palette: Palette


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for the on-the-fly canvas stream."""

    image_size: int = 64
    patch: int = 8
    mask_ratio: float = 0.75
    p_mix: float = 0.3
    mix_samples: int = 2
    ids_per_pair: tuple[int, int] = (1, 4)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    # Milder transform for same-image view partners: keeps them closer to
    # adjacent video frames, which is what view pairs stand in for.
    view_aug: AugmentConfig = field(
        default_factory=lambda: AugmentConfig(crop_scale=(0.75, 1.0), p_flip=0.3)
    )


def _shared_ids(example_map: SegmentMap, query_map: SegmentMap) -> set[int]:
    return example_map.id_set() & query_map.id_set()


def build_training_draw(
    dataset: Dataset,
    spec: MixtureSpec,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> TrainingDraw | None:
    """One draw from a dataset; None when the pair shares no ids (rare)."""
    kind = dataset.kind
    aug = replace(cfg.aug, out_size=cfg.image_size)
    view_aug = replace(cfg.view_aug, out_size=cfg.image_size)
    anchor = dataset.samples[int(rng.integers(len(dataset.samples)))]
    # Instance pairs stand in for adjacent video frames, so both sides use
    # the milder view transform; category queries keep the strong one.
    query = augment(anchor, rng, view_aug if kind == INSTANCE else aug)
    partner = sample_context_partner(dataset.samples, anchor, kind, spec.p_view, rng, aug=view_aug)
    if partner.source.shape[0] != cfg.image_size:
        partner = augment(partner, rng, replace(IDENTITY_AUGMENT, out_size=cfg.image_size))

    example_map = map_for_kind(partner, kind)
    query_map = map_for_kind(query, kind)
    shared = _shared_ids(example_map, query_map)
    if not shared:
        return None
    lo, hi = cfg.ids_per_pair
    n_ids = min(int(rng.integers(lo, hi + 1)), len(shared))
    chosen = sorted(int(i) for i in rng.choice(sorted(shared), size=n_ids, replace=False))

    palette = sample_palette(chosen, rng)
    example_source = partner.source
    example_target = recolor(example_map.restrict(chosen), palette)
    if rng.random() < cfg.p_mix:
        extras = [_MapSample(example_source, example_map.restrict(chosen))]
        for _ in range(cfg.mix_samples - 1):
            view = augment(anchor, rng, aug)
            extras.append(_MapSample(view.source, map_for_kind(view, kind).restrict(chosen)))
        example_source, example_target, _ = mix_context(extras, palette, cfg.image_size, rng)

    pair = InContextPair(
        example_source=example_source,
        example_target=example_target,
        query_source=query.source,
        query_target=recolor(query_map.restrict(chosen), palette),
        palette=palette,
    )
    canvas = build_canvas(pair, cfg.mask_ratio, cfg.patch, rng)
    return TrainingDraw(canvas=canvas, task_kind=kind, dataset_tag=dataset.tag, palette=palette)


@dataclass
class _MapSample:
    source: np.ndarray
    map: SegmentMap


def mixture_sampler(
    spec: MixtureSpec,
    datasets: dict[str, Dataset],
    rng: np.random.Generator,
    cfg: SamplerConfig = SamplerConfig(),
) -> Iterator[TrainingDraw]:
    """Infinite stream of training draws: dataset by weight, anchor uniform,
    partner per task type, one palette per pair, optional mix-context."""
    missing = set(spec.tags()) - set(datasets)
    if missing:
        raise BadSpec(f"unresolvable dataset tags: {sorted(missing)}")
    while True:
        tag = pick_dataset(spec, rng)
        draw = build_training_draw(datasets[tag], spec, cfg, rng)
        if draw is not None:
            yield draw


def worker_rng(base_seed: int, worker_id: int) -> np.random.Generator:
    """Independent per-worker stream derived from (base_seed, worker_id)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=base_seed, spawn_key=(worker_id,)))


def save_dataset(dataset: Dataset, root: str | Path) -> Path:
    """Write `<root>/<tag>/images/*.png`, `maps/*.png` (16-bit), `meta.json`."""
    base = Path(root) / dataset.tag
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "maps").mkdir(parents=True, exist_ok=True)
    categories = {}
    for i, sample in enumerate(dataset.samples):
        stem = f"{i:06d}"
        pngio.save_image(base / "images" / f"{stem}.png", sample.source)
        pngio.save_map(base / "maps" / f"{stem}.png", sample.map)
        categories[stem] = {str(k): int(v) for k, v in sorted(sample.categories.items())}
    meta = {"tag": dataset.tag, "kind": dataset.kind, "categories": categories}
    (base / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return base


def load_dataset(root: str | Path, tag: str) -> Dataset:
    """Load any dataset in the on-disk layout; synthetic and real data are
    interchangeable."""
    base = Path(root) / tag
    meta = json.loads((base / "meta.json").read_text())
    samples = []
    for stem in sorted(meta["categories"]):
        source = pngio.load_image(base / "images" / f"{stem}.png")
        segmap = pngio.load_map(base / "maps" / f"{stem}.png", kind=INSTANCE)
        cats = {int(k): int(v) for k, v in meta["categories"][stem].items()}
        samples.append(LabeledSample(source, segmap, cats, tag))
    return Dataset(tag=tag, kind=meta["kind"], samples=samples)
