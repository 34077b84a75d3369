"""Windowed correlation volume and patch descriptors used as matching features."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .raster import as_field

DEFAULT_WINDOW = 9


def displacements(window: int) -> list[tuple[int, int]]:
    """Window offsets ``(du, dv)`` in volume channel order (row-major, dv outer)."""
    r = window // 2
    return [(du, dv) for dv in range(-r, r + 1) for du in range(-r, r + 1)]


def _shifted(f: np.ndarray, du: int, dv: int) -> np.ndarray:
    """``out(u, v) = f(clamp(u + du), clamp(v + dv))``."""
    h, w, _ = f.shape
    rows = np.clip(np.arange(h) + dv, 0, h - 1)
    cols = np.clip(np.arange(w) + du, 0, w - 1)
    return f[rows][:, cols]


def correlation_volume(f1, f2, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Channel-mean product of ``f1(p)`` and ``f2(p + d)`` for every window offset ``d``.

    Returns an ``(H, W, window**2)`` array ordered as :func:`displacements`.
    """
    f1 = as_field(f1)
    f2 = as_field(f2)
    if f1.shape != f2.shape:
        raise ShapeError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    h, w, c = f1.shape
    out = np.empty((h, w, window * window))
    for k, (du, dv) in enumerate(displacements(window)):
        out[:, :, k] = (f1 * _shifted(f2, du, dv)).sum(axis=2) / c
    return out


def patch_descriptor(image) -> np.ndarray:
    """Zero-mean 3x3 neighbourhood of every pixel, 9 channels per input channel."""
    image = as_field(image)
    h, w, c = image.shape
    patches = np.stack([_shifted(image, du, dv) for du, dv in displacements(3)], axis=3)
    patches = patches - patches.mean(axis=3, keepdims=True)
    return patches.reshape(h, w, c * 9)
