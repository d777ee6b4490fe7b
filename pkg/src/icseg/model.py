"""Vanilla ViT over 2x2 canvases with per-patch pixel regression.

Masked patches are swapped for a learnable mask token before encoding; one
of two learnable task embeddings (category- vs instance-level coloring) is
added to the patch embeddings of the target-column quadrants; a single
linear head regresses the pixels of every patch.  Pre-norm blocks, learned
absolute positional embeddings over the full canvas.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .palette import CATEGORY, INSTANCE, Canvas

PIXEL_MEAN = 0.5
PIXEL_STD = 0.5
TASK_INDEX = {CATEGORY: 0, INSTANCE: 1}

CHECKPOINT_MAGIC = b"ICSG"
CHECKPOINT_VERSION = 1


class BadConfig(ValueError):
    pass


class GeometryMismatch(ValueError):
    pass


class EmptyMask(ValueError):
    pass


class CheckpointMismatch(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    canvas_side: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.canvas_side % self.patch:
            raise BadConfig(f"canvas_side {self.canvas_side} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise BadConfig(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise BadConfig("depth must be >= 1")

    @property
    def grid(self) -> int:
        return self.canvas_side // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_values(self) -> int:
        return self.patch * self.patch * 3

    @property
    def image_side(self) -> int:
        """Side of one quadrant (a single example/query image)."""
        return self.canvas_side // 2


def normalize_pixels(image: np.ndarray) -> np.ndarray:
    """uint8 RGB -> standardized float32 ((x/255 - mean) / std)."""
    return ((np.asarray(image, dtype=np.float32) / 255.0) - PIXEL_MEAN) / PIXEL_STD


def denormalize_pixels(values: np.ndarray) -> np.ndarray:
    """Standardized prediction -> float RGB in [0, 1]."""
    return np.clip(np.asarray(values) * PIXEL_STD + PIXEL_MEAN, 0.0, 1.0)


def patchify(pixels: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, S, S, 3) -> (B, N, patch*patch*3), row-major patch order."""
    b, h, w, c = pixels.shape
    gh, gw = h // patch, w // patch
    x = pixels.reshape(b, gh, patch, gw, patch, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, patch * patch * c)


def unpatchify(tokens: torch.Tensor, patch: int, side: int) -> torch.Tensor:
    """(B, N, patch*patch*3) -> (B, S, S, 3)."""
    b, n, _ = tokens.shape
    g = side // patch
    x = tokens.reshape(b, g, g, patch, patch, 3)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, side, side, 3)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim, bias=True)

    def forward(self, x: torch.Tensor, return_attn: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj(out)
        if return_attn:
            return out, attn
        return out


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _target_column_index(cfg: ModelConfig) -> torch.Tensor:
    """Boolean (N,) marking patches in the right (target) column quadrants."""
    g = cfg.grid
    cols = torch.arange(g * g) % g
    return cols >= g // 2


def _query_row_index(cfg: ModelConfig) -> torch.Tensor:
    """Boolean (N,) marking patches in the bottom (query) row quadrants."""
    g = cfg.grid
    rows = torch.arange(g * g) // g
    return rows >= g // 2


class SegViT(nn.Module):
    """Masked-inpainting ViT over canvases.

    forward() consumes patch tokens plus a per-patch mask plan and returns
    per-patch pixel predictions in standardized space.  `attn_hook`, when
    given, is called as hook(x, layer) after every attention sublayer and
    must return the (possibly modified) activations; this is the seam the
    feature ensemble uses.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_values, cfg.dim)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches, cfg.dim))
        self.mask_token = nn.Parameter(torch.zeros(cfg.dim))
        # Row 0: category-level coloring, row 1: instance-level coloring.
        self.task_embed = nn.Parameter(torch.zeros(2, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim)
        self.decoder = nn.Linear(cfg.dim, cfg.patch_values)
        target_cols = _target_column_index(cfg)
        query_rows = _query_row_index(cfg)
        self.register_buffer("target_cols", target_cols, persistent=False)
        self.register_buffer("query_rows", query_rows, persistent=False)

    def forward(
        self,
        tokens: torch.Tensor,
        patch_mask: torch.Tensor,
        task_idx: torch.Tensor,
        attn_hook: Callable[[torch.Tensor, int], torch.Tensor] | None = None,
    ) -> torch.Tensor:
        if tokens.shape[1] != self.cfg.num_patches or tokens.shape[2] != self.cfg.patch_values:
            raise GeometryMismatch(
                f"expected tokens (B, {self.cfg.num_patches}, {self.cfg.patch_values}), got {tuple(tokens.shape)}"
            )
        x = self.patch_embed(tokens)
        x = torch.where(patch_mask.unsqueeze(-1), self.mask_token.to(x.dtype), x)
        x = x + self.pos_embed
        task = self.task_embed[task_idx].unsqueeze(1)  # (B, 1, D)
        x = x + task * self.target_cols.unsqueeze(-1)
        for i, block in enumerate(self.blocks):
            x = x + block.attn(block.norm1(x))
            if attn_hook is not None:
                x = attn_hook(x, i)
            x = x + block.mlp(block.norm2(x))
        return self.decoder(self.norm(x))


def _trunc_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator) -> None:
    nn.init.trunc_normal_(tensor, std=std, a=-2 * std, b=2 * std, generator=generator)


def init_model(config: ModelConfig, seed: int | None = None) -> SegViT:
    """Fresh model: truncated normal (sigma 0.02) weights, zero biases,
    deterministic by seed (config.seed unless overridden)."""
    model = SegViT(config)
    gen = torch.Generator().manual_seed(config.seed if seed is None else seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".bias"):
                p.zero_()
            elif "norm" in name and name.endswith(".weight"):
                p.fill_(1.0)
            else:
                _trunc_normal_(p, 0.02, gen)
        model.decoder.bias.zero_()
    return model


def canvas_tokens(canvas: Canvas, cfg: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Canvas -> (tokens (1, N, D), patch_mask (1, N)) after geometry checks."""
    h, w = canvas.side
    if h != cfg.canvas_side or w != cfg.canvas_side or canvas.patch != cfg.patch:
        raise GeometryMismatch(
            f"canvas {h}x{w} patch {canvas.patch} does not match model "
            f"{cfg.canvas_side}x{cfg.canvas_side} patch {cfg.patch}"
        )
    pixels = torch.from_numpy(normalize_pixels(canvas.pixels)).unsqueeze(0)
    tokens = patchify(pixels, cfg.patch)
    mask = torch.from_numpy(canvas.mask_plan.reshape(-1).copy()).unsqueeze(0)
    return tokens, mask


def forward_canvas(
    model: SegViT,
    canvas: Canvas,
    task_kind: str,
    attn_hook: Callable[[torch.Tensor, int], torch.Tensor] | None = None,
) -> np.ndarray:
    """Run one canvas and return the query_target quadrant as float RGB in
    [0, 1].  Only masked positions are meaningful to callers."""
    cfg = model.cfg
    tokens, mask = canvas_tokens(canvas, cfg)
    task = torch.tensor([TASK_INDEX[task_kind]], dtype=torch.long)
    with torch.no_grad():
        pred = model(tokens, mask, task, attn_hook)
    full = unpatchify(pred, cfg.patch, cfg.canvas_side)[0].numpy()
    half = cfg.image_side
    return denormalize_pixels(full[half:, half:])


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Weighted mean of elementwise smooth-l1: 0.5 x^2 for |x| < 1 else |x| - 0.5.

    `mask` holds non-negative weights broadcastable to pred's shape; raises
    EmptyMask when the total weight is zero.
    """
    if pred.shape != target.shape:
        raise GeometryMismatch(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    weights = torch.broadcast_to(mask.to(pred.dtype), pred.shape)
    total = weights.sum()
    if total.item() == 0:
        raise EmptyMask("mask weights sum to zero")
    diff = pred - target
    absdiff = diff.abs()
    per_elem = torch.where(absdiff < 1.0, 0.5 * diff * diff, absdiff - 0.5)
    return (per_elem * weights).sum() / total


def state_checksum(model: SegViT) -> str:
    """SHA-256 over all parameters, order-stable; detects any mutation."""
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: SegViT, path: str | Path, extra: dict | None = None) -> None:
    """Versioned container: JSON config header, then (name, shape, f32 LE
    data) records for every tensor."""
    header = {"version": CHECKPOINT_VERSION, "config": asdict(model.cfg), "extra": extra or {}}
    header_bytes = json.dumps(header, sort_keys=True).encode()
    state = model.state_dict()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    buf.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f4")
        name_b = name.encode()
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMismatch(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {version}")
    off = 12
    header = json.loads(data[off : off + header_len])
    off += header_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    return ModelConfig(**header["config"]), header.get("extra", {}), tensors


def load_model(path: str | Path, expected: ModelConfig | None = None) -> SegViT:
    """Rebuild a model from a checkpoint; refuses a config mismatch."""
    cfg, _, tensors = load_checkpoint(path)
    if expected is not None and cfg != expected:
        raise CheckpointMismatch(f"checkpoint config {cfg} does not match expected {expected}")
    model = SegViT(cfg)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return model
