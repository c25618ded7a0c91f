"""Denoising, contrast enhancement, resizing and geometric augmentation.

Grids are float arrays in [0, 1]. Every function here is pure; ``augment``
draws all of its randomness from the generator it is handed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError


@dataclass(frozen=True)
class PrepConfig:
    median_kernel: int = 3
    clahe_tiles: int = 8
    clahe_clip: float = 2.0
    target_size: int = 64
    crop_scale: tuple[float, float] = (0.85, 1.0)
    rotation_max: float = 10.0

    def validate(self, patch_size: int | None = None) -> "PrepConfig":
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ConfigError(f"median_kernel must be odd and >= 1, got {self.median_kernel}")
        if self.clahe_tiles < 1:
            raise ConfigError(f"clahe_tiles must be >= 1, got {self.clahe_tiles}")
        if self.clahe_clip < 1:
            raise ConfigError(f"clahe_clip must be >= 1, got {self.clahe_clip}")
        if self.target_size < 2:
            raise ConfigError(f"target_size must be >= 2, got {self.target_size}")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale must satisfy 0 < min <= max <= 1, got {self.crop_scale}")
        if self.rotation_max < 0:
            raise ConfigError(f"rotation_max must be >= 0, got {self.rotation_max}")
        if patch_size is not None and self.target_size % patch_size:
            raise ConfigError(f"target_size {self.target_size} not divisible by patch_size {patch_size}")
        return self


def median_filter(grid: np.ndarray, kernel: int = 3) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"median kernel must be odd and >= 1, got {kernel}")
    if kernel > min(grid.shape):
        raise ValueError(f"median kernel {kernel} larger than grid {grid.shape}")
    return ndimage.median_filter(grid, size=kernel, mode="nearest")


def _tile_bounds(n: int, tiles: int) -> np.ndarray:
    return np.linspace(0, n, tiles + 1).round().astype(int)


def clahe(grid: np.ndarray, tiles: int = 8, clip: float = 2.0, bins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation.

    Each tile's histogram is clipped at ``clip`` times its mean bin height and
    the clipped mass is spread evenly over all bins in one pass. A pixel's
    output interpolates bilinearly between the mappings of the four nearest
    tile centres (clamped at the borders).
    """
    g = np.clip(np.asarray(grid, dtype=float), 0.0, 1.0)
    if g.size == 0:
        raise ValueError("clahe on an empty grid")
    H, W = g.shape
    if tiles < 1 or tiles > min(H, W):
        raise ValueError(f"{tiles} tiles per side do not fit a {H}x{W} grid")
    idx = np.minimum((g * bins).astype(int), bins - 1)
    rb, cb = _tile_bounds(H, tiles), _tile_bounds(W, tiles)
    maps = np.empty((tiles, tiles, bins))
    for i in range(tiles):
        for j in range(tiles):
            block = idx[rb[i]:rb[i + 1], cb[j]:cb[j + 1]]
            hist = np.bincount(block.ravel(), minlength=bins).astype(float)
            if math.isfinite(clip):
                limit = clip * block.size / bins
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / bins
            maps[i, j] = np.cumsum(hist) / block.size
    rc = 0.5 * (rb[:-1] + rb[1:]) - 0.5
    cc = 0.5 * (cb[:-1] + cb[1:]) - 0.5

    def weights(pos, centres):
        k = np.clip(np.searchsorted(centres, pos, side="right") - 1, 0, len(centres) - 1)
        k1 = np.minimum(k + 1, len(centres) - 1)
        span = np.where(k1 > k, centres[k1] - centres[k], 1.0)
        t = np.clip((pos - centres[k]) / span, 0.0, 1.0)
        return k, k1, t

    r0, r1, tr = weights(np.arange(H, dtype=float), rc)
    c0, c1, tc = weights(np.arange(W, dtype=float), cc)
    R0, C0 = r0[:, None], c0[None, :]
    R1, C1 = r1[:, None], c1[None, :]
    TR, TC = tr[:, None], tc[None, :]
    out = ((1 - TR) * (1 - TC) * maps[R0, C0, idx] + (1 - TR) * TC * maps[R0, C1, idx]
           + TR * (1 - TC) * maps[R1, C0, idx] + TR * TC * maps[R1, C1, idx])
    return np.clip(out, 0.0, 1.0)


def resize(grid: np.ndarray, target, order: int = 1) -> np.ndarray:
    """Corner-aligned bilinear (``order=1``) or nearest (``order=0``) resampling."""
    grid = np.asarray(grid, dtype=float)
    th, tw = (target, target) if np.isscalar(target) else target
    if th < 2 or tw < 2:
        raise ValueError(f"resize target must be >= 2, got {(th, tw)}")
    H, W = grid.shape
    if (th, tw) == (H, W):
        return grid.copy()
    rows = np.linspace(0, H - 1, th)
    cols = np.linspace(0, W - 1, tw)
    if order == 0:
        return grid[np.rint(rows).astype(int)][:, np.rint(cols).astype(int)]
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bot = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def preprocess_layers(layers: np.ndarray, cfg: PrepConfig) -> np.ndarray:
    """Median filter, CLAHE and resize, per layer."""
    out = []
    for layer in layers:
        x = median_filter(layer, cfg.median_kernel)
        x = clahe(x, cfg.clahe_tiles, cfg.clahe_clip)
        out.append(resize(x, cfg.target_size))
    return np.stack(out)


# ---------------------------------------------------------------------------
# augmentation: crop -> flip -> rotate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentDraw:
    crop_scale: float
    crop_top: float  # fraction of the slack, in [0, 1]
    crop_left: float
    flip: bool
    angle: float


def draw_augment(cfg: PrepConfig, rng: np.random.Generator) -> AugmentDraw:
    lo, hi = cfg.crop_scale
    return AugmentDraw(
        crop_scale=float(rng.uniform(lo, hi)),
        crop_top=float(rng.uniform()),
        crop_left=float(rng.uniform()),
        flip=bool(rng.uniform() < 0.5),
        angle=float(rng.uniform(-cfg.rotation_max, cfg.rotation_max)),
    )


def crop_window(shape: tuple[int, int], draw: AugmentDraw) -> tuple[slice, slice]:
    H, W = shape
    h = max(2, int(round(H * draw.crop_scale)))
    w = max(2, int(round(W * draw.crop_scale)))
    top = int(round((H - h) * draw.crop_top))
    left = int(round((W - w) * draw.crop_left))
    return slice(top, top + h), slice(left, left + w)


def hflip(grid: np.ndarray) -> np.ndarray:
    return np.asarray(grid)[..., ::-1].copy()


def rotate(grid: np.ndarray, angle: float, order: int = 1) -> np.ndarray:
    if angle == 0:
        return np.asarray(grid).copy()
    return ndimage.rotate(grid, angle, reshape=False, order=order, mode="constant", cval=0.0)


def apply_geometry(grid: np.ndarray, draw: AugmentDraw, order: int = 1) -> np.ndarray:
    """Crop (then resize back), optional flip, rotation; order 0 for masks."""
    grid = np.asarray(grid, dtype=float)
    rs, cs = crop_window(grid.shape, draw)
    out = resize(grid[rs, cs], grid.shape, order=order)
    if draw.flip:
        out = hflip(out)
    out = rotate(out, draw.angle, order=order)
    return np.clip(out, 0.0, 1.0)


def augment(sample, rng: np.random.Generator, cfg: PrepConfig = PrepConfig()):
    """Same random geometry for all three layers (bilinear) and the mask (nearest)."""
    draw = draw_augment(cfg, rng)
    layers = np.stack([apply_geometry(layer, draw, order=1) for layer in sample.layers])
    mask = (apply_geometry(sample.vessel_mask, draw, order=0) > 0.5).astype(np.uint8)
    return replace(sample, layers=layers, vessel_mask=mask)
