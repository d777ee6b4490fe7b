"""Random-palette coloring: id maps, palette sampling, recoloring, decoding,
in-context pair construction, mix-context stitching, and canvas assembly."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

CATEGORY = "category"
INSTANCE = "instance"
KINDS = (CATEGORY, INSTANCE)

BACKGROUND = (0, 0, 0)
# Minimum pairwise Euclidean RGB distance between palette colors (background
# included).  Keeps nearest-color decoding robust against regression noise.
DEFAULT_MIN_DIST = 64.0
MAX_SAMPLE_ATTEMPTS = 10_000


class PaletteError(Exception):
    """Base class for coloring-scheme failures."""


class PaletteInfeasible(PaletteError):
    """Rejection sampling could not place enough well-separated colors."""


class MissingEntry(PaletteError):
    """A segment id in the map has no palette entry."""


class BadGeometry(ValueError):
    """Image/patch dimensions are inconsistent."""


@dataclass(frozen=True, eq=False)
class SegmentMap:
    """Integer label image: one segment id per pixel, 0 = background.

    `kind` records whether ids denote categories or object instances; the
    coloring scheme itself only sees ids.
    """

    ids: np.ndarray
    kind: str = CATEGORY

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise BadGeometry(f"segment map must be 2-D, got shape {ids.shape}")
        if ids.size and ids.min() < 0:
            raise ValueError("segment ids must be non-negative")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "ids", ids.astype(np.int32, copy=False))

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def id_set(self) -> set[int]:
        """Nonzero ids present in the map."""
        present = np.unique(self.ids)
        return {int(i) for i in present if i != 0}

    def restrict(self, keep: Iterable[int]) -> "SegmentMap":
        """Zero out every id not in `keep` (background stays background)."""
        keep = set(int(k) for k in keep)
        mask = np.isin(self.ids, sorted(keep))
        return SegmentMap(np.where(mask, self.ids, 0), self.kind)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SegmentMap)
            and self.kind == other.kind
            and self.ids.shape == other.ids.shape
            and bool(np.array_equal(self.ids, other.ids))
        )


@dataclass(frozen=True, eq=False)
class Palette:
    """Injective map from segment ids to RGB triples plus a background color."""

    entries: dict[int, tuple[int, int, int]]
    background: tuple[int, int, int] = BACKGROUND

    def __post_init__(self):
        entries = {int(k): tuple(int(c) for c in v) for k, v in self.entries.items()}
        background = tuple(int(c) for c in self.background)
        if any(k <= 0 for k in entries):
            raise ValueError("palette entries must use positive segment ids")
        colors = list(entries.values()) + [background]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colors must be pairwise distinct")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "background", background)

    def ordered_ids(self) -> list[int]:
        return sorted(self.entries)

    def color_of(self, seg_id: int) -> tuple[int, int, int]:
        if seg_id == 0:
            return self.background
        try:
            return self.entries[int(seg_id)]
        except KeyError:
            raise MissingEntry(f"no palette entry for id {seg_id}") from None

    def min_distance(self) -> float:
        """Smallest pairwise Euclidean distance among all colors."""
        colors = np.array([self.background] + [self.entries[i] for i in self.ordered_ids()], dtype=np.float64)
        if len(colors) < 2:
            return math.inf
        d2 = ((colors[:, None, :] - colors[None, :, :]) ** 2).sum(-1)
        d2[np.diag_indices(len(colors))] = np.inf
        return float(np.sqrt(d2.min()))

    def to_json(self) -> str:
        return json.dumps(
            {
                "background": list(self.background),
                "entries": {str(i): list(self.entries[i]) for i in self.ordered_ids()},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Palette":
        obj = json.loads(text)
        return cls(
            entries={int(k): tuple(v) for k, v in obj["entries"].items()},
            background=tuple(obj["background"]),
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Palette)
            and self.background == other.background
            and self.entries == other.entries
        )


@dataclass(frozen=True, eq=False)
class InContextPair:
    """Two (source, target) image pairs sharing one palette.

    The example pair defines the task; the query is solved by analogy.
    `query_target` is absent at inference time.
    """

    example_source: np.ndarray
    example_target: np.ndarray
    query_source: np.ndarray
    query_target: np.ndarray | None
    palette: Palette

    def __post_init__(self):
        shapes = {self.example_source.shape, self.example_target.shape, self.query_source.shape}
        if self.query_target is not None:
            shapes.add(self.query_target.shape)
        if len(shapes) != 1:
            raise BadGeometry(f"all pair images must share one shape, got {sorted(shapes)}")
        h, w, c = self.example_source.shape
        if c != 3:
            raise BadGeometry("pair images must be RGB")


@dataclass(frozen=True, eq=False)
class Canvas:
    """The 2x2 stitched model input.

    Layout: row 0 = (example_source | example_target),
            row 1 = (query_source  | query_target).
    `mask_plan` is a per-patch boolean grid; True marks patches hidden from
    the model and reconstructed.  Masked patches only ever lie in the
    query_target quadrant.
    """

    pixels: np.ndarray  # (2H, 2W, 3) uint8
    mask_plan: np.ndarray  # (2H/patch, 2W/patch) bool
    patch: int

    @property
    def side(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def quadrant(self, row: int, col: int) -> np.ndarray:
        h, w = self.pixels.shape[0] // 2, self.pixels.shape[1] // 2
        return self.pixels[row * h : (row + 1) * h, col * w : (col + 1) * w]

    def query_target_patch_bounds(self) -> tuple[int, int, int, int]:
        """(row0, row1, col0, col1) of the query_target quadrant in patch units."""
        gh, gw = self.mask_plan.shape
        return gh // 2, gh, gw // 2, gw


def sample_palette(
    ids: Iterable[int],
    rng: np.random.Generator,
    *,
    min_dist: float = DEFAULT_MIN_DIST,
    background: tuple[int, int, int] = BACKGROUND,
    max_attempts: int = MAX_SAMPLE_ATTEMPTS,
) -> Palette:
    """Sample an injective palette over `ids` by rejection.

    Every color (background included) is pairwise separated by at least
    `min_dist` in Euclidean RGB distance.  Deterministic given the rng
    state.  Raises PaletteInfeasible when `max_attempts` candidate draws
    are exhausted, which signals too many ids for the separation bound.
    """
    ids = sorted({int(i) for i in ids})
    if not ids:
        raise ValueError("need at least one segment id")
    if any(i <= 0 for i in ids):
        raise ValueError("segment ids must be positive")

    accepted = np.array([background], dtype=np.float64)
    colors: list[tuple[int, int, int]] = []
    attempts = 0
    while len(colors) < len(ids):
        if attempts >= max_attempts:
            raise PaletteInfeasible(
                f"could not place {len(ids) + 1} colors at distance >= {min_dist} "
                f"within {max_attempts} attempts"
            )
        attempts += 1
        cand = rng.integers(0, 256, size=3)
        d2 = ((accepted - cand[None, :]) ** 2).sum(axis=1)
        if d2.min() >= min_dist * min_dist:
            accepted = np.vstack([accepted, cand[None, :]])
            colors.append(tuple(int(c) for c in cand))
    return Palette(entries=dict(zip(ids, colors)), background=background)


def recolor(segmap: SegmentMap, palette: Palette) -> np.ndarray:
    """Paint a segment map with its palette; background id 0 gets the
    background color.  Raises MissingEntry when an id has no entry."""
    present = segmap.id_set()
    missing = present - set(palette.entries)
    if missing:
        raise MissingEntry(f"ids without palette entries: {sorted(missing)}")
    max_id = int(segmap.ids.max(initial=0))
    lut = np.zeros((max_id + 1, 3), dtype=np.uint8)
    lut[0] = palette.background
    for seg_id, color in palette.entries.items():
        if seg_id <= max_id:
            lut[seg_id] = color
    return lut[segmap.ids]


def decode(image: np.ndarray, palette: Palette, kind: str = CATEGORY) -> SegmentMap:
    """Assign each pixel the id whose palette color is nearest (Euclidean).

    Total function: ties break toward the smallest id, and background loses
    ties to any foreground id.
    """
    if not palette.entries:
        raise ValueError("palette has no entries")
    fg_ids = palette.ordered_ids()
    cand_ids = np.array(fg_ids + [0], dtype=np.int32)
    cand_colors = np.array(
        [palette.entries[i] for i in fg_ids] + [palette.background], dtype=np.float32
    )
    pix = np.asarray(image, dtype=np.float32).reshape(-1, 3)
    # (P, K) squared distances; argmin picks the first minimum, i.e. the
    # smallest id, with background ordered last.
    d2 = ((pix[:, None, :] - cand_colors[None, :, :]) ** 2).sum(axis=2)
    ids = cand_ids[np.argmin(d2, axis=1)].reshape(image.shape[:2])
    return SegmentMap(ids, kind)


def make_incontext_pair(
    example,
    query,
    rng: np.random.Generator,
    *,
    ids: Iterable[int] | None = None,
    min_dist: float = DEFAULT_MIN_DIST,
) -> InContextPair:
    """Build an in-context pair from two labeled samples sharing context.

    `example` and `query` expose `.source` (RGB uint8) and `.map`
    (SegmentMap) of identical geometry and kind.  One palette is sampled
    over the union of selected ids (default: all ids present in either
    map) and both targets are recolored with it; unselected ids fall back
    to background.
    """
    if example.map.kind != query.map.kind:
        raise ValueError("example and query maps must share a kind")
    if example.source.shape != query.source.shape:
        raise BadGeometry("example and query must have identical dimensions")
    if ids is None:
        ids = example.map.id_set() | query.map.id_set()
    ids = sorted({int(i) for i in ids})
    palette = sample_palette(ids, rng, min_dist=min_dist)
    return InContextPair(
        example_source=example.source,
        example_target=recolor(example.map.restrict(ids), palette),
        query_source=query.source,
        query_target=recolor(query.map.restrict(ids), palette),
        palette=palette,
    )


def mix_context(
    samples: Sequence,
    palette: Palette,
    out_size: int,
    rng: np.random.Generator,
    *,
    crop_scale: tuple[float, float] = (0.5, 1.0),
) -> tuple[np.ndarray, np.ndarray, SegmentMap]:
    """Stitch several same-palette samples horizontally, random-crop, resize.

    The crop window is applied identically to sources and maps; the map is
    resampled with nearest neighbor and recolored afterwards, so output
    target colors always belong to the palette (plus background).  Returns
    (source, target, map) at `out_size` square.
    """
    if len(samples) < 2:
        raise ValueError("mix-context needs at least two samples")
    heights = {s.source.shape[0] for s in samples}
    if len(heights) != 1:
        raise BadGeometry("stitched samples must share a height")
    kind = samples[0].map.kind
    src = np.concatenate([s.source for s in samples], axis=1)
    ids = np.concatenate([s.map.ids for s in samples], axis=1)

    h, w = ids.shape
    scale = float(rng.uniform(*crop_scale))
    ch = max(1, round(scale * h))
    cw = max(1, round(scale * w))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    src = src[y0 : y0 + ch, x0 : x0 + cw]
    ids = ids[y0 : y0 + ch, x0 : x0 + cw]

    src_im = Image.fromarray(src).resize((out_size, out_size), Image.BILINEAR)
    ids_im = Image.fromarray(ids.astype(np.int32), mode="I").resize(
        (out_size, out_size), Image.NEAREST
    )
    out_map = SegmentMap(np.asarray(ids_im, dtype=np.int32), kind)
    return np.asarray(src_im), recolor(out_map, palette), out_map


def build_canvas(
    pair: InContextPair,
    mask_ratio: float,
    patch: int,
    rng: np.random.Generator,
) -> Canvas:
    """Assemble the 2x2 canvas and a mask plan over the query_target quadrant.

    ceil(mask_ratio * P) patches of the quadrant are chosen uniformly
    without replacement; mask_ratio 1.0 hides the whole quadrant
    (inference mode).  When the pair has no query_target the quadrant is
    filled with the palette background.
    """
    if not 0.0 < mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio must be in (0, 1], got {mask_ratio}")
    h, w, _ = pair.example_source.shape
    if h % patch or w % patch:
        raise BadGeometry(f"image size {h}x{w} not divisible by patch {patch}")

    pixels = np.empty((2 * h, 2 * w, 3), dtype=np.uint8)
    pixels[:h, :w] = pair.example_source
    pixels[:h, w:] = pair.example_target
    pixels[h:, :w] = pair.query_source
    if pair.query_target is not None:
        pixels[h:, w:] = pair.query_target
    else:
        pixels[h:, w:] = np.array(pair.palette.background, dtype=np.uint8)

    gh, gw = 2 * h // patch, 2 * w // patch
    qh, qw = gh // 2, gw // 2
    n_quadrant = qh * qw
    n_masked = math.ceil(mask_ratio * n_quadrant)
    flat = rng.choice(n_quadrant, size=n_masked, replace=False)
    mask_plan = np.zeros((gh, gw), dtype=bool)
    mask_plan[qh + flat // qw, qw + flat % qw] = True
    return Canvas(pixels=pixels, mask_plan=mask_plan, patch=patch)
