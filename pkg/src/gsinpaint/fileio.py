"""Image and raster files: 8-bit PNG and the SPLR float raster."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

SPLR_MAGIC = b"SPLR"
_SPLR_HEADER = struct.Struct("<4sIII")


class RasterFormatError(ValueError):
    pass


def write_splr(path, data: np.ndarray) -> None:
    """H x W [x C] float map as little-endian float32, row-major, channels last."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"raster must be 2-D or 3-D, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_SPLR_HEADER.pack(SPLR_MAGIC, h, w, c))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_splr(path) -> np.ndarray:
    """Returns float32 (H, W) for single-channel rasters, else (H, W, C)."""
    data = Path(path).read_bytes()
    if len(data) < _SPLR_HEADER.size:
        raise RasterFormatError(f"{path}: truncated header")
    magic, h, w, c = _SPLR_HEADER.unpack_from(data)
    if magic != SPLR_MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r}")
    n = h * w * c
    if len(data) != _SPLR_HEADER.size + 4 * n:
        raise RasterFormatError(f"{path}: payload size mismatch")
    arr = np.frombuffer(data, dtype="<f4", offset=_SPLR_HEADER.size, count=n).reshape(h, w, c)
    arr = arr.astype(np.float32)
    return arr[:, :, 0] if c == 1 else arr


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """Float image in [0, 1] (H x W or H x W x 3) or boolean mask as 8-bit PNG."""
    arr = np.asarray(img)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    """RGB PNG as float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def read_label_png(path) -> np.ndarray:
    """Labels from the red channel; 0 is unlabelled and maps to -1."""
    with Image.open(path) as im:
        red = np.asarray(im.convert("RGB"))[:, :, 0].astype(np.int64)
    return red - 1


def write_label_png(path, labels: np.ndarray) -> None:
    if labels.max(initial=-1) > 254:
        raise ValueError("at most 255 labels fit in the red channel")
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    rgb[:, :, 0] = (labels + 1).astype(np.uint8)
    Image.fromarray(rgb).save(path)


def heatmap(values: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Black-red-yellow-white ramp for inspecting error and gradient maps."""
    v = np.asarray(values, dtype=np.float64)
    top = vmax if vmax is not None else (float(v.max()) if v.size and v.max() > 0 else 1.0)
    t = np.clip(v / top, 0.0, 1.0)
    return np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)], axis=-1)
