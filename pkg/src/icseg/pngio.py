"""PNG serialization: 16-bit single-channel segment maps, 8-bit RGB images."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .palette import CATEGORY, SegmentMap


def save_image(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def save_map(path: str | Path, segmap: SegmentMap) -> None:
    if segmap.ids.max(initial=0) > 0xFFFF:
        raise ValueError("segment ids exceed 16-bit PNG range")
    Image.fromarray(segmap.ids.astype(np.uint16)).save(path, format="PNG")


def load_map(path: str | Path, kind: str = CATEGORY) -> SegmentMap:
    arr = np.asarray(Image.open(path), dtype=np.int32)
    return SegmentMap(arr, kind)


def image_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def map_bytes(segmap: SegmentMap) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(segmap.ids.astype(np.uint16)).save(buf, format="PNG")
    return buf.getvalue()


def image_from_bytes(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))


def map_from_bytes(data: bytes, kind: str = CATEGORY) -> SegmentMap:
    arr = np.asarray(Image.open(io.BytesIO(data)), dtype=np.int32)
    if arr.ndim != 2:
        raise ValueError("mask PNG must be single-channel")
    return SegmentMap(arr, kind)
