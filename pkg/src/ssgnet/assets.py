"""Built-in synthetic test scenes.

Five small RGB compositions with clearly separable regions (blobs, stripes,
blocks, rings, smooth clutter), generated deterministically from a seed so
tests and the CLI demo path need no binary fixtures on disk.  Values are
float32 in [0, 1], shape (3, size, size).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

_NOISE = 0.015


def _grid(size: int):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return y / (size - 1), x / (size - 1)


def _box_blur1d(a: np.ndarray, radius: int, axis: int) -> np.ndarray:
    if radius < 1:
        return a
    width = 2 * radius + 1
    pad = [(0, 0)] * a.ndim
    pad[axis] = (radius + 1, radius)
    ap = np.pad(a, pad, mode="edge")
    c = np.cumsum(ap, axis=axis)
    hi = np.take(c, np.arange(width, c.shape[axis]), axis=axis)
    lo = np.take(c, np.arange(0, c.shape[axis] - width), axis=axis)
    return (hi - lo) / width


def _blur(a: np.ndarray, radius: int) -> np.ndarray:
    return _box_blur1d(_box_blur1d(a, radius, -1), radius, -2)


def _finish(channels, rng: np.random.Generator) -> np.ndarray:
    img = np.stack(channels)
    img = img + rng.standard_normal(img.shape) * _NOISE
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _scene_blob(size: int, rng) -> np.ndarray:
    yy, xx = _grid(size)
    d = np.sqrt((yy - 0.42) ** 2 + (xx - 0.58) ** 2)
    disk = 1.0 / (1.0 + np.exp((d - 0.27) * size * 0.6))
    r = 0.15 + 0.70 * disk + 0.10 * yy
    g = 0.30 + 0.15 * disk + 0.05 * xx
    b = 0.55 - 0.35 * disk + 0.08 * (1.0 - yy)
    return _finish([r, g, b], rng)


def _scene_stripes(size: int, rng) -> np.ndarray:
    yy, xx = _grid(size)
    band = (np.floor((yy + xx) * 3.0) % 2.0)
    r = 0.18 + 0.62 * band
    g = 0.55 - 0.30 * band + 0.08 * yy
    b = 0.35 + 0.10 * band + 0.10 * xx
    return _finish([r, g, b], rng)


def _scene_blocks(size: int, rng) -> np.ndarray:
    yy, xx = _grid(size)
    q = (yy >= 0.5).astype(np.float64) * 2 + (xx >= 0.5)
    palette = np.array([[0.85, 0.25, 0.20],
                        [0.20, 0.65, 0.30],
                        [0.20, 0.35, 0.80],
                        [0.85, 0.75, 0.25]])
    r = palette[q.astype(int), 0] + 0.05 * yy
    g = palette[q.astype(int), 1] + 0.05 * xx
    b = palette[q.astype(int), 2]
    return _finish([r, g, b], rng)


def _scene_rings(size: int, rng) -> np.ndarray:
    yy, xx = _grid(size)
    d = np.sqrt((yy - 0.5) ** 2 + (xx - 0.5) ** 2)
    ring = np.clip(np.floor(d * 4.2), 0, 2)
    shades = np.array([[0.80, 0.55, 0.20],
                       [0.25, 0.55, 0.70],
                       [0.15, 0.20, 0.35]])
    r = shades[ring.astype(int), 0]
    g = shades[ring.astype(int), 1] + 0.06 * yy
    b = shades[ring.astype(int), 2] + 0.06 * xx
    return _finish([r, g, b], rng)


def _scene_clutter(size: int, rng) -> np.ndarray:
    radius = max(2, size // 12)
    chans = []
    for _ in range(3):
        n = _blur(rng.standard_normal((size, size)), radius)
        lo, hi = n.min(), n.max()
        chans.append(0.15 + 0.70 * (n - lo) / (hi - lo + 1e-12))
    return _finish(chans, rng)


_SCENES = (_scene_blob, _scene_stripes, _scene_blocks, _scene_rings,
           _scene_clutter)


def builtin_images(count: int = 5, size: int = 64, seed: int = 7) -> list:
    """The first ``count`` synthetic scenes at the given square size."""
    if not (1 <= count <= len(_SCENES)):
        raise ContractError(
            f"count must be in [1, {len(_SCENES)}], got {count}"
        )
    if size < 8:
        raise ContractError(f"size must be >= 8, got {size}")
    rng = np.random.default_rng(seed)
    return [scene(size, rng) for scene in _SCENES[:count]]
