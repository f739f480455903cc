"""Augmentation and test-time-view toolbox.

Mixing ops (cutmix, mixup), grid-region shuffling with bounded displacement,
attention-guided crop and drop, and the multi-view test-time sets (3-view and
144-crop).  Every randomized op is seeded; train loops pass a shared rng via
the `rng=` keyword so draw order stays reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .imageops import (
    center_crop,
    crop,
    hflip,
    resize_bilinear,
    resize_shorter_side,
    validate_image,
)


@dataclass
class MixedSample:
    image: np.ndarray
    target: np.ndarray
    lam: float


@dataclass
class RegionPermutation:
    """Bijective tile mapping on a grid_n x grid_n partition.

    dest[i, j] holds the (row, col) destination of source tile (i, j); per
    axis no tile moves further than 2 * k cells.
    """

    grid_n: int
    k: int
    dest: np.ndarray  # (grid_n, grid_n, 2) int


@dataclass
class ViewSet:
    views: list[np.ndarray]
    names: list[str]

    def __len__(self) -> int:
        return len(self.views)


def _resolve_rng(seed, rng):
    if rng is not None:
        return rng
    if seed is None:
        raise ValidationError("either seed or rng must be provided")
    return np.random.default_rng(seed)


def _check_pair(image_a, target_a, image_b, target_b) -> None:
    validate_image(image_a)
    validate_image(image_b)
    if image_a.shape != image_b.shape:
        raise ValidationError(
            f"image shapes differ: {image_a.shape} vs {image_b.shape}"
        )
    if len(target_a) != len(target_b):
        raise ValidationError(
            f"target lengths differ: {len(target_a)} vs {len(target_b)}"
        )


def cutmix_arrays(image_a, target_a, image_b, target_b, alpha: float,
                  rng: np.random.Generator, forced_lam: float | None = None
                  ) -> MixedSample:
    """Paste a random box from image_b into image_a.

    Draw order is pinned: lam, then box center x, then y.  The returned lam
    is recomputed from the clipped box so that
    target == lam * target_a + (1 - lam) * target_b holds exactly.
    """
    _check_pair(image_a, target_a, image_b, target_b)
    if alpha <= 0:
        raise ValidationError("cutmix alpha must be > 0")
    h, w = image_a.shape[:2]
    lam = float(rng.beta(alpha, alpha)) if forced_lam is None else float(forced_lam)
    if not (0 <= lam <= 1):
        raise ValidationError("lam must lie in [0, 1]")
    ratio = np.sqrt(1.0 - lam)
    box_w = int(round(ratio * w))
    box_h = int(round(ratio * h))
    cx = int(rng.integers(0, w))
    cy = int(rng.integers(0, h))
    x0 = max(0, cx - box_w // 2)
    x1 = min(w, cx - box_w // 2 + box_w)
    y0 = max(0, cy - box_h // 2)
    y1 = min(h, cy - box_h // 2 + box_h)

    mixed = np.array(image_a, copy=True)
    mixed[y0:y1, x0:x1] = image_b[y0:y1, x0:x1]
    lam_adj = 1.0 - ((x1 - x0) * (y1 - y0)) / float(h * w)
    target = lam_adj * np.asarray(target_a, dtype=np.float64) + (
        1.0 - lam_adj
    ) * np.asarray(target_b, dtype=np.float64)
    return MixedSample(image=mixed, target=target, lam=lam_adj)


def cutmix(image_a, target_a, image_b, target_b, alpha: float, seed: int,
           forced_lam: float | None = None) -> MixedSample:
    rng = np.random.default_rng(seed)
    return cutmix_arrays(image_a, target_a, image_b, target_b, alpha, rng,
                         forced_lam=forced_lam)


def mixup(image_a, target_a, image_b, target_b, alpha: float,
          seed: int, forced_lam: float | None = None) -> MixedSample:
    """Convex blend of two images and their targets with one shared lam."""
    _check_pair(image_a, target_a, image_b, target_b)
    if alpha <= 0:
        raise ValidationError("mixup alpha must be > 0")
    rng = np.random.default_rng(seed)
    lam = float(rng.beta(alpha, alpha)) if forced_lam is None else float(forced_lam)
    if not (0 <= lam <= 1):
        raise ValidationError("lam must lie in [0, 1]")
    image = (
        lam * image_a.astype(np.float64) + (1.0 - lam) * image_b.astype(np.float64)
    )
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    target = lam * np.asarray(target_a, dtype=np.float64) + (
        1.0 - lam
    ) * np.asarray(target_b, dtype=np.float64)
    return MixedSample(image=image, target=target, lam=lam)


def rcm_permutation(grid_n: int, k: int, seed: int | None = None,
                    rng: np.random.Generator | None = None) -> RegionPermutation:
    """Neighborhood-bounded tile shuffle.

    Each row's columns are reordered by sorting jittered keys j + U(-k, k),
    then each column's rows the same way; sorting keys that moved at most k
    keeps every tile within 2 * k cells of home along each axis.
    """
    if grid_n < 2:
        raise ValidationError("grid_n must be >= 2")
    if not (0 <= k < grid_n):
        raise ValidationError("k must lie in [0, grid_n)")
    rng = _resolve_rng(seed, rng)
    n = grid_n
    base = np.arange(n, dtype=np.float64)

    # column destination per row: invert the argsort of the jittered keys
    col_dest = np.empty((n, n), dtype=np.int64)
    for i in range(n):
        keys = base + rng.uniform(-k, k, size=n)
        order = np.argsort(keys, kind="stable")
        col_dest[i, order] = np.arange(n)

    # row destination per (intermediate) column
    row_dest_by_col = np.empty((n, n), dtype=np.int64)
    for c in range(n):
        keys = base + rng.uniform(-k, k, size=n)
        order = np.argsort(keys, kind="stable")
        inv = np.empty(n, dtype=np.int64)
        inv[order] = np.arange(n)
        row_dest_by_col[c] = inv

    dest = np.empty((n, n, 2), dtype=np.int64)
    for i in range(n):
        for j in range(n):
            c = col_dest[i, j]
            dest[i, j, 0] = row_dest_by_col[c, i]
            dest[i, j, 1] = c
    return RegionPermutation(grid_n=n, k=k, dest=dest)


def rcm_destruct(image: np.ndarray, perm: RegionPermutation):
    """Apply a tile permutation; returns (shuffled image, alignment targets).

    Alignment targets give, per destination cell, the source cell's
    normalized (row, col) in [0, 1].
    """
    validate_image(image)
    h, w = image.shape[:2]
    n = perm.grid_n
    if h % n != 0 or w % n != 0:
        raise ValidationError(
            f"image sides ({h}, {w}) must be divisible by grid_n {n}"
        )
    th, tw = h // n, w // n
    out = np.empty_like(image)
    align = np.empty((n, n, 2), dtype=np.float64)
    denom = max(n - 1, 1)
    for i in range(n):
        for j in range(n):
            di, dj = perm.dest[i, j]
            out[di * th : (di + 1) * th, dj * tw : (dj + 1) * tw] = image[
                i * th : (i + 1) * th, j * tw : (j + 1) * tw
            ]
            align[di, dj, 0] = i / denom
            align[di, dj, 1] = j / denom
    return out, align


def rcm_restore(image: np.ndarray, perm: RegionPermutation) -> np.ndarray:
    """Undo rcm_destruct for the same permutation."""
    validate_image(image)
    h, w = image.shape[:2]
    n = perm.grid_n
    if h % n != 0 or w % n != 0:
        raise ValidationError(
            f"image sides ({h}, {w}) must be divisible by grid_n {n}"
        )
    th, tw = h // n, w // n
    out = np.empty_like(image)
    for i in range(n):
        for j in range(n):
            di, dj = perm.dest[i, j]
            out[i * th : (i + 1) * th, j * tw : (j + 1) * tw] = image[
                di * th : (di + 1) * th, dj * tw : (dj + 1) * tw
            ]
    return out


def _upscale_nearest(amap: np.ndarray, h: int, w: int) -> np.ndarray:
    mh, mw = amap.shape
    rows = np.minimum((np.arange(h) + 0.5) * mh / h, mh - 1).astype(np.int64)
    cols = np.minimum((np.arange(w) + 0.5) * mw / w, mw - 1).astype(np.int64)
    return amap[rows][:, cols]


def attention_crop(image: np.ndarray, attention_map: np.ndarray,
                   theta_crop: float, out_size: int) -> np.ndarray:
    """Crop the box around high-attention cells and resize it to out_size.

    The box is the bounding box of cells >= theta_crop * max, widened by a
    10 percent margin per side; an all-zero map falls back to the whole image.
    """
    validate_image(image)
    if not (0 < theta_crop <= 1):
        raise ValidationError("theta_crop must lie in (0, 1]")
    if out_size < 1:
        raise ValidationError("out_size must be >= 1")
    h, w = image.shape[:2]
    amap = np.asarray(attention_map, dtype=np.float64)
    peak = amap.max() if amap.size else 0.0
    if peak <= 0:
        return resize_bilinear(image, out_size, out_size)
    up = _upscale_nearest(amap, h, w)
    mask = up >= theta_crop * peak
    if not mask.any():
        return resize_bilinear(image, out_size, out_size)
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    my = int(round(0.1 * (y1 - y0)))
    mx = int(round(0.1 * (x1 - x0)))
    y0, y1 = max(0, y0 - my), min(h, y1 + my)
    x0, x1 = max(0, x0 - mx), min(w, x1 + mx)
    region = crop(image, y0, x0, y1 - y0, x1 - x0)
    return resize_bilinear(region, out_size, out_size)


def attention_drop(image: np.ndarray, attention_map: np.ndarray,
                   theta_drop: float) -> np.ndarray:
    """Zero out pixels under high-attention cells; all-zero map is a no-op."""
    validate_image(image)
    if not (0 < theta_drop <= 1):
        raise ValidationError("theta_drop must lie in (0, 1]")
    amap = np.asarray(attention_map, dtype=np.float64)
    peak = amap.max() if amap.size else 0.0
    out = np.array(image, copy=True)
    if peak <= 0:
        return out
    h, w = image.shape[:2]
    up = _upscale_nearest(amap, h, w)
    out[up >= theta_drop * peak] = 0.0
    return out


def tta_three(image: np.ndarray, crop_size: int, seed: int) -> ViewSet:
    """Three test views: center crop, random crop, random crop + mirror."""
    validate_image(image)
    h, w = image.shape[:2]
    if not (1 <= crop_size <= min(h, w)):
        raise ValidationError(
            f"crop_size {crop_size} must lie in [1, {min(h, w)}]"
        )
    rng = np.random.default_rng(seed)
    views = [center_crop(image, crop_size, crop_size)]
    names = ["center"]
    for name, mirror in (("random", False), ("random_flip", True)):
        top = int(rng.integers(0, h - crop_size + 1))
        left = int(rng.integers(0, w - crop_size + 1))
        view = crop(image, top, left, crop_size, crop_size)
        if mirror:
            view = hflip(view)
        views.append(view)
        names.append(name)
    return ViewSet(views=views, names=names)


def crops_144(image: np.ndarray,
              scales: tuple[int, ...] = (36, 40, 44, 48),
              crop_size: int = 32) -> ViewSet:
    """Dense multi-view set: scales x 3 squares x 6 sub-views x 2 mirrors.

    Per scale the shorter side is resized to the scale, three squares slide
    along the longer side (both ends plus center), and each square yields
    four corner crops, a center crop, and the whole square resized.  Mirrors
    interleave so view 2i+1 is the horizontal flip of view 2i.
    """
    validate_image(image)
    if not scales:
        raise ValidationError("scales must be non-empty")
    if any(s < crop_size for s in scales):
        raise ValidationError("every scale must be >= crop_size")
    if crop_size < 1:
        raise ValidationError("crop_size must be >= 1")

    views: list[np.ndarray] = []
    names: list[str] = []
    for s in scales:
        resized = resize_shorter_side(image, s)
        rh, rw = resized.shape[:2]
        if rh >= rw:
            span = rh - s
            offsets = [(0, 0), ((span // 2), 0), (span, 0)]
        else:
            span = rw - s
            offsets = [(0, 0), (0, span // 2), (0, span)]
        for sq_idx, (oy, ox) in enumerate(offsets):
            square = crop(resized, oy, ox, s, s)
            edge = s - crop_size
            sub = [
                ("tl", crop(square, 0, 0, crop_size, crop_size)),
                ("tr", crop(square, 0, edge, crop_size, crop_size)),
                ("bl", crop(square, edge, 0, crop_size, crop_size)),
                ("br", crop(square, edge, edge, crop_size, crop_size)),
                ("center", center_crop(square, crop_size, crop_size)),
                ("full", resize_bilinear(square, crop_size, crop_size)),
            ]
            for sub_name, view in sub:
                views.append(view)
                names.append(f"s{s}/sq{sq_idx}/{sub_name}")
                views.append(hflip(view))
                names.append(f"s{s}/sq{sq_idx}/{sub_name}/flip")
    return ViewSet(views=views, names=names)
