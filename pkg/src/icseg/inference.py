"""In-context prediction: single-example, spatial ensemble (n x n tiling),
feature ensemble (query features averaged after each attention layer), and
sequential video mask propagation over a FIFO of predicted frames."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .model import (
    TASK_INDEX,
    GeometryMismatch,
    SegViT,
    denormalize_pixels,
    normalize_pixels,
    patchify,
    unpatchify,
)
from .palette import (
    INSTANCE,
    Canvas,
    InContextPair,
    Palette,
    SegmentMap,
    build_canvas,
    decode,
    recolor,
    sample_palette,
)

SINGLE = "single"
SPATIAL = "spatial"
FEATURE = "feature"
STRATEGIES = (SINGLE, SPATIAL, FEATURE)

# VOS default: frame-count ablation optimum.
DEFAULT_VOS_FRAMES = 8


class GridOverflow(ValueError):
    pass


class EmptyVideo(ValueError):
    pass


@dataclass
class EnsembleSpec:
    """How to combine context examples at inference time."""

    strategy: str
    examples: list[tuple[np.ndarray, np.ndarray]]
    grid_n: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.examples:
            raise ValueError("at least one example is required")
        if self.strategy == SINGLE and len(self.examples) != 1:
            raise ValueError("single strategy requires exactly one example")
        if self.strategy == SPATIAL:
            if self.grid_n < 1:
                raise ValueError("spatial strategy requires grid_n >= 1")
            if len(self.examples) > self.grid_n**2:
                raise GridOverflow(
                    f"{len(self.examples)} examples exceed a {self.grid_n}x{self.grid_n} grid"
                )
        shapes = {s.shape for s, _ in self.examples} | {t.shape for _, t in self.examples}
        if len(shapes) != 1:
            raise GeometryMismatch(f"examples must share one shape, got {sorted(shapes)}")


def spatial_ensemble(
    examples: Sequence[tuple[np.ndarray, np.ndarray]],
    grid_n: int,
    background: tuple[int, int, int] = (0, 0, 0),
) -> tuple[np.ndarray, np.ndarray]:
    """Tile examples row-major into an n x n grid and area-subsample back to
    a single example slot.  Empty cells are filled with the background."""
    if not 1 <= len(examples) <= grid_n**2:
        raise GridOverflow(f"{len(examples)} examples do not fit a {grid_n}x{grid_n} grid")
    h, w, _ = examples[0][0].shape
    if grid_n == 1:
        return examples[0][0].copy(), examples[0][1].copy()
    src_grid = np.empty((grid_n * h, grid_n * w, 3), dtype=np.uint8)
    tgt_grid = np.empty_like(src_grid)
    src_grid[:] = background
    tgt_grid[:] = background
    for i, (src, tgt) in enumerate(examples):
        r, c = divmod(i, grid_n)
        src_grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = src
        tgt_grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = tgt
    src_out = np.asarray(Image.fromarray(src_grid).resize((w, h), Image.BOX))
    tgt_out = np.asarray(Image.fromarray(tgt_grid).resize((w, h), Image.BOX))
    return src_out, tgt_out


# The query_target quadrant is fully masked at inference, so its fill color
# never reaches the model; any valid palette works for canvas assembly.
_CANVAS_FILL_PALETTE = Palette({1: (255, 255, 255)})


def inference_canvas(
    example_source: np.ndarray,
    example_target: np.ndarray,
    query: np.ndarray,
    patch: int,
) -> Canvas:
    """Canvas with the query_target quadrant fully masked."""
    pair = InContextPair(example_source, example_target, query, None, _CANVAS_FILL_PALETTE)
    return build_canvas(pair, 1.0, patch, np.random.default_rng(0))


class FeatureAveragingHook:
    """After each attention sublayer, replace query-row features (both
    bottom quadrants) in every canvas with their mean across canvases, so
    the query gathers information from all examples.  Records a per-layer
    trace of the averaged activations when asked."""

    def __init__(self, query_rows: torch.Tensor, keep_trace: bool = False):
        self.query_rows = query_rows
        self.trace: list[torch.Tensor] | None = [] if keep_trace else None

    def __call__(self, x: torch.Tensor, layer: int) -> torch.Tensor:
        mean = x[:, self.query_rows, :].mean(dim=0, keepdim=True)
        x = x.clone()
        x[:, self.query_rows, :] = mean
        if self.trace is not None:
            self.trace.append(mean.detach().clone())
        return x


def _forward_batch(
    model: SegViT,
    canvases: list[Canvas],
    task_kind: str,
    attn_hook=None,
) -> np.ndarray:
    """Forward canvases as one batch; returns query_target quadrants as
    float RGB in [0, 1], shape (B, H, W, 3)."""
    cfg = model.cfg
    for canvas in canvases:
        h, w = canvas.side
        if h != cfg.canvas_side or w != cfg.canvas_side or canvas.patch != cfg.patch:
            raise GeometryMismatch(
                f"canvas {h}x{w} patch {canvas.patch} vs model {cfg.canvas_side} patch {cfg.patch}"
            )
    pixels = torch.from_numpy(np.stack([normalize_pixels(c.pixels) for c in canvases]))
    tokens = patchify(pixels, cfg.patch)
    mask = torch.from_numpy(np.stack([c.mask_plan.reshape(-1) for c in canvases]))
    task = torch.full((len(canvases),), TASK_INDEX[task_kind], dtype=torch.long)
    with torch.no_grad():
        pred = model(tokens, mask, task, attn_hook)
    full = unpatchify(pred, cfg.patch, cfg.canvas_side).numpy()
    half = cfg.image_side
    return denormalize_pixels(full[:, half:, half:])


def predict_pixels(
    model: SegViT,
    spec: EnsembleSpec,
    query: np.ndarray,
    task_kind: str,
) -> np.ndarray:
    """Predicted query_target pixels as float RGB in [0, 1]."""
    cfg = model.cfg
    side = cfg.image_side
    if query.shape != (side, side, 3):
        raise GeometryMismatch(f"query must be {side}x{side}x3, got {query.shape}")
    for src, tgt in spec.examples:
        if src.shape != query.shape or tgt.shape != query.shape:
            raise GeometryMismatch("examples must match the query geometry")

    if spec.strategy == SINGLE:
        src, tgt = spec.examples[0]
        return _forward_batch(model, [inference_canvas(src, tgt, query, cfg.patch)], task_kind)[0]
    if spec.strategy == SPATIAL:
        src, tgt = spatial_ensemble(spec.examples, spec.grid_n)
        return _forward_batch(model, [inference_canvas(src, tgt, query, cfg.patch)], task_kind)[0]
    # feature ensemble
    canvases = [inference_canvas(src, tgt, query, cfg.patch) for src, tgt in spec.examples]
    hook = FeatureAveragingHook(model.query_rows)
    outputs = _forward_batch(model, canvases, task_kind, attn_hook=hook)
    return outputs.mean(axis=0)


def predict(
    model: SegViT,
    spec: EnsembleSpec,
    query: np.ndarray,
    task_kind: str,
    palette: Palette,
) -> SegmentMap:
    """Decode the predicted query_target pixels back to segment ids."""
    pixels = predict_pixels(model, spec, query, task_kind)
    return decode(pixels * 255.0, palette, kind=task_kind)


@dataclass
class VosState:
    """Permanent first example plus a bounded queue of recent predictions."""

    first: tuple[np.ndarray, SegmentMap]
    capacity: int
    fifo: deque = field(default_factory=deque)

    def __post_init__(self):
        # First frame always counts as one example; the FIFO holds the rest.
        self.fifo = deque(self.fifo, maxlen=max(self.capacity - 1, 0))

    def push(self, frame: np.ndarray, prediction: SegmentMap) -> None:
        self.fifo.append((frame, prediction))

    def examples(self, palette: Palette) -> list[tuple[np.ndarray, np.ndarray]]:
        pairs = [(self.first[0], recolor(self.first[1], palette))]
        pairs.extend((frame, recolor(pred, palette)) for frame, pred in self.fifo)
        return pairs


def vos_run(
    model: SegViT,
    frames: Sequence[np.ndarray],
    first_mask: SegmentMap,
    k_frames: int = DEFAULT_VOS_FRAMES,
    *,
    strategy: str = FEATURE,
    seed: int = 0,
) -> list[SegmentMap]:
    """Propagate the first-frame mask through a video.

    Frame t is predicted from the annotated first frame plus up to
    k_frames - 1 most recent predictions (feature ensemble by default);
    each prediction is pushed to the FIFO.  One palette, sampled from the
    first mask, is used for the whole sequence.
    """
    if len(frames) == 0:
        raise EmptyVideo("no frames")
    if frames[0].shape[:2] != first_mask.ids.shape:
        raise GeometryMismatch("first mask must align with frame 0")
    if k_frames < 1:
        raise ValueError("k_frames must be >= 1")
    ids = first_mask.id_set()
    if not ids:
        raise ValueError("first mask has no objects")
    palette = sample_palette(ids, np.random.default_rng(seed))
    state = VosState(first=(frames[0], first_mask), capacity=k_frames)
    outputs = [first_mask]
    for frame in frames[1:]:
        examples = state.examples(palette)
        if strategy == SINGLE and len(examples) > 1:
            raise ValueError("single strategy supports k_frames=1 only")
        grid_n = math.ceil(math.sqrt(len(examples))) if strategy == SPATIAL else 0
        spec = EnsembleSpec(strategy=strategy, examples=examples, grid_n=grid_n)
        prediction = predict(model, spec, frame, INSTANCE, palette)
        state.push(frame, prediction)
        outputs.append(prediction)
    return outputs
