"""Pixel-grid geometry shared across the toolkit: resizing, cropping, pooling.

Images are (H, W, C) float arrays with values in [0, 1].
"""
from __future__ import annotations

import numpy as np

from .errors import ValidationError

_MIN_SIDE = 8


def validate_image(image: np.ndarray) -> None:
    """Check the image carrier invariants; raises ValidationError on violation."""
    if image.ndim != 3:
        raise ValidationError(f"image must be (H, W, C), got shape {image.shape}")
    h, w = image.shape[:2]
    if h < _MIN_SIDE or w < _MIN_SIDE:
        raise ValidationError(f"image sides must be >= {_MIN_SIDE}, got {h}x{w}")
    if not np.all(np.isfinite(image)):
        raise ValidationError("image contains non-finite pixels")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValidationError("image pixels must lie in [0, 1]")


def _axis_grid(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel-center sampling grid, clamped at the borders
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo0 = np.clip(lo, 0, src - 1)
    lo1 = np.clip(lo + 1, 0, src - 1)
    return lo0, lo1, frac


_grid_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _cached_grid(src: int, dst: int):
    key = (src, dst)
    if key not in _grid_cache:
        _grid_cache[key] = _axis_grid(src, dst)
    return _grid_cache[key]


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) image; output dtype float32 in [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"target size must be positive, got {out_h}x{out_w}")
    src_h, src_w = image.shape[:2]
    if (src_h, src_w) == (out_h, out_w):
        return image.astype(np.float32, copy=True)
    y0, y1, fy = _cached_grid(src_h, out_h)
    x0, x1, fx = _cached_grid(src_w, out_w)
    img = image.astype(np.float64, copy=False)
    rows = img[y0] * (1.0 - fy)[:, None, None] + img[y1] * fy[:, None, None]
    out = rows[:, x0] * (1.0 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resize_batch(images: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (N, H, W, C) stack in one pass."""
    src_h, src_w = images.shape[1:3]
    if (src_h, src_w) == (out_h, out_w):
        return images.astype(np.float32, copy=True)
    y0, y1, fy = _cached_grid(src_h, out_h)
    x0, x1, fx = _cached_grid(src_w, out_w)
    imgs = images.astype(np.float64, copy=False)
    rows = imgs[:, y0] * (1.0 - fy)[None, :, None, None] + imgs[:, y1] * fy[None, :, None, None]
    out = rows[:, :, x0] * (1.0 - fx)[None, None, :, None] + rows[:, :, x1] * fx[None, None, :, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resize_shorter_side(image: np.ndarray, size: int) -> np.ndarray:
    """Resize so the shorter side equals `size`, preserving aspect ratio."""
    h, w = image.shape[:2]
    if h <= w:
        return resize_bilinear(image, size, max(1, round(w * size / h)))
    return resize_bilinear(image, max(1, round(h * size / w)), size)


def crop(image: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    """Extract a window; must lie fully inside the image."""
    h, w = image.shape[:2]
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ValidationError(
            f"crop [{top}:{top + height}, {left}:{left + width}] exceeds {h}x{w} image"
        )
    return image[top : top + height, left : left + width].copy()


def center_crop(image: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = image.shape[:2]
    return crop(image, (h - height) // 2, (w - width) // 2, height, width)


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror left-right."""
    return np.ascontiguousarray(image[:, ::-1])


def avgpool_to(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Average-pool an (H, W, C) image onto an out_h x out_w grid.

    Bins are equal when the dims divide evenly, nearly equal otherwise.
    """
    h, w = image.shape[:2]
    if h % out_h == 0 and w % out_w == 0:
        c = image.shape[2]
        blocks = image.reshape(out_h, h // out_h, out_w, w // out_w, c)
        return blocks.mean(axis=(1, 3))
    rows = [np.mean(part, axis=0) for part in np.array_split(image, out_h, axis=0)]
    stacked = np.stack(rows)
    cols = [np.mean(part, axis=1) for part in np.array_split(stacked, out_w, axis=1)]
    return np.stack(cols, axis=1)
