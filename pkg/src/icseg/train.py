"""Optimization: AdamW with decoupled weight decay, linear warmup + cosine
decay, the canvas training loop, and prompt tuning against a frozen model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch

from .data import TrainingDraw
from .model import (
    PIXEL_MEAN,
    PIXEL_STD,
    TASK_INDEX,
    ModelConfig,
    SegViT,
    normalize_pixels,
    patchify,
    save_checkpoint,
    smooth_l1,
    state_checksum,
    unpatchify,
)
from .palette import Palette, SegmentMap, recolor


class NonFiniteLoss(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 16
    total_steps: int = 2000
    warmup_steps: int = 400
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        positive = {
            "base_lr": self.base_lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "total_steps": self.total_steps,
            "warmup_steps": self.warmup_steps,
            "eps": self.eps,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then half-cosine decay to zero."""
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# Parameters exempt from weight decay: biases, normalization gains, and the
# learned embeddings/tokens (anything that is not a 2-D+ projection matrix,
# plus the positional table).
_NO_DECAY_NAMES = ("pos_embed", "mask_token", "task_embed")


def param_groups(model: SegViT, cfg: TrainConfig) -> list[dict]:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.ndim <= 1 or any(tag in name for tag in _NO_DECAY_NAMES):
            no_decay.append(p)
        else:
            decay.append(p)
    return [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def make_optimizer(model: SegViT, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(param_groups(model, cfg), lr=cfg.base_lr, betas=cfg.betas, eps=cfg.eps)


@dataclass
class TrainBatch:
    """Collated canvases as patch tokens plus the per-patch loss mask."""

    tokens: torch.Tensor  # (B, N, patch_values) standardized pixels
    patch_mask: torch.Tensor  # (B, N) bool
    task_idx: torch.Tensor  # (B,) long


def collate(draws: Sequence[TrainingDraw], cfg: ModelConfig) -> TrainBatch:
    pixels = np.stack([normalize_pixels(d.canvas.pixels) for d in draws])
    tokens = patchify(torch.from_numpy(pixels), cfg.patch)
    mask = torch.from_numpy(np.stack([d.canvas.mask_plan.reshape(-1) for d in draws]))
    task = torch.tensor([TASK_INDEX[d.task_kind] for d in draws], dtype=torch.long)
    return TrainBatch(tokens=tokens, patch_mask=mask, task_idx=task)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def train_step(
    model: SegViT,
    optimizer: torch.optim.Optimizer,
    batch: TrainBatch,
    cfg: TrainConfig,
    step: int,
) -> float:
    """One update at cosine_lr(step); loss is the batch mean of smooth-l1
    over masked pixels.  Raises NonFiniteLoss with diagnostics."""
    if batch.tokens.shape[0] == 0:
        raise ValueError("batch is empty")
    lr = cosine_lr(step, cfg)
    set_lr(optimizer, lr)
    optimizer.zero_grad(set_to_none=True)
    pred = model(batch.tokens, batch.patch_mask, batch.task_idx)
    loss = smooth_l1(pred, batch.tokens, batch.patch_mask.unsqueeze(-1))
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss={value} at step={step} lr={lr:.3e}")
    loss.backward()
    optimizer.step()
    return value


def fit(
    model: SegViT,
    stream: Iterator[TrainingDraw],
    cfg: TrainConfig,
    *,
    log: Callable[[str], None] | None = None,
    log_every: int = 100,
    out_dir: str | Path | None = None,
    checkpoint_every: int = 0,
) -> list[tuple[int, float, float]]:
    """Drive the stream for cfg.total_steps updates.

    Emits `step=<int> lr=<float> loss=<float>` lines and optional periodic
    checkpoints.  Returns the (step, lr, loss) history.
    """
    optimizer = make_optimizer(model, cfg)
    history = []
    for step in range(cfg.total_steps):
        draws = [next(stream) for _ in range(cfg.batch_size)]
        batch = collate(draws, model.cfg)
        loss = train_step(model, optimizer, batch, cfg, step)
        history.append((step, cosine_lr(step, cfg), loss))
        if log is not None and (step % log_every == 0 or step == cfg.total_steps - 1):
            log(f"step={step} lr={cosine_lr(step, cfg):.6e} loss={loss:.6f}")
        if out_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_checkpoint(model, Path(out_dir) / f"step{step + 1:06d}.ckpt", extra={"step": step + 1})
    return history


@dataclass
class PromptTensor:
    """Learned example pair in standardized pixel space, plug-and-play."""

    source: np.ndarray  # (H, W, 3) float32, standardized
    target: np.ndarray  # (H, W, 3) float32, standardized

    def as_images(self) -> tuple[np.ndarray, np.ndarray]:
        """Clamp to the valid pixel range and export as uint8 RGB."""

        def to_u8(arr):
            return np.clip((arr * PIXEL_STD + PIXEL_MEAN) * 255.0, 0, 255).round().astype(np.uint8)

        return to_u8(self.source), to_u8(self.target)


@dataclass
class PromptTuneTask:
    """Queries with ground truth under one fixed palette and task kind."""

    palette: Palette
    queries: list[tuple[np.ndarray, SegmentMap]]  # (source uint8, gt map)
    task_kind: str


def tune_prompt(
    model: SegViT,
    task: PromptTuneTask,
    steps: int,
    cfg: TrainConfig,
    *,
    learn_source: bool = True,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    batch_size: int = 4,
    mask_ratio: float = 0.75,
) -> PromptTensor:
    """Optimize a learnable example pair against a frozen model.

    The model is frozen (weights bitwise unchanged, verified by callers via
    state_checksum); only the prompt tensors receive gradients.  Tuning
    keeps the training-style random masking of the query target
    (`mask_ratio`); `init` optionally seeds the prompt from a concrete
    (source, target) uint8 pair; `learn_source=False` freezes the source
    half.
    """
    if not task.queries:
        raise ValueError("tuning task has no queries")
    mcfg = model.cfg
    half = mcfg.image_side
    rng = np.random.default_rng(cfg.seed)
    torch_gen = torch.Generator().manual_seed(cfg.seed)

    if init is not None:
        src0 = torch.from_numpy(normalize_pixels(init[0]).copy())
        tgt0 = torch.from_numpy(normalize_pixels(init[1]).copy())
    else:
        src0 = torch.zeros(half, half, 3)
        tgt0 = torch.zeros(half, half, 3)
        src0.normal_(0.0, 0.1, generator=torch_gen)
        tgt0.normal_(0.0, 0.1, generator=torch_gen)

    prompt_src = src0.clone().requires_grad_(learn_source)
    prompt_tgt = tgt0.clone().requires_grad_(True)
    learnable = [prompt_tgt] + ([prompt_src] if learn_source else [])

    was_training = model.training
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)

    optimizer = torch.optim.AdamW(learnable, lr=cfg.base_lr, betas=cfg.betas, eps=cfg.eps, weight_decay=0.0)
    task_idx = torch.tensor([TASK_INDEX[task.task_kind]], dtype=torch.long)

    g = mcfg.grid
    quadrant = (g // 2) * (g // 2)
    n_masked = max(1, math.ceil(mask_ratio * quadrant))

    def sample_mask() -> torch.Tensor:
        plan = np.zeros((g, g), dtype=bool)
        flat = rng.choice(quadrant, size=n_masked, replace=False)
        plan[g // 2 + flat // (g // 2), g // 2 + flat % (g // 2)] = True
        return torch.from_numpy(plan.reshape(1, -1))

    query_tensors = [
        (
            torch.from_numpy(normalize_pixels(src).copy()),
            torch.from_numpy(normalize_pixels(recolor(gt, task.palette)).copy()),
        )
        for src, gt in task.queries
    ]

    for step in range(steps):
        optimizer.zero_grad(set_to_none=True)
        # Frozen model: no warmup, plain half-cosine decay over the run.
        set_lr(optimizer, cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(steps, 1))))
        picks = rng.choice(len(query_tensors), size=min(batch_size, len(query_tensors)), replace=False)
        losses = []
        for qi in picks:
            q_src, q_tgt = query_tensors[int(qi)]
            mask_plan = sample_mask()
            canvas = torch.zeros(mcfg.canvas_side, mcfg.canvas_side, 3)
            canvas[:half, :half] = prompt_src
            canvas[:half, half:] = prompt_tgt
            canvas[half:, :half] = q_src
            canvas[half:, half:] = q_tgt
            tokens = patchify(canvas.unsqueeze(0), mcfg.patch)
            pred = model(tokens, mask_plan, task_idx)
            target = patchify(canvas.detach().unsqueeze(0), mcfg.patch)
            losses.append(smooth_l1(pred, target, mask_plan.unsqueeze(-1)))
        loss = torch.stack(losses).mean()
        if not math.isfinite(loss.item()):
            raise NonFiniteLoss(f"prompt tuning loss={loss.item()} at step={step}")
        loss.backward()
        optimizer.step()
        # Keep the prompt inside the representable pixel range so the
        # exported example pair loses nothing to clamping.
        with torch.no_grad():
            for p in learnable:
                p.clamp_(-1.0, 1.0)

    for p in model.parameters():
        p.requires_grad_(True)
    model.train(was_training)
    return PromptTensor(
        source=prompt_src.detach().numpy().copy(),
        target=prompt_tgt.detach().numpy().copy(),
    )
