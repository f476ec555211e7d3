"""2D-average degradation and the non-learned baseline upsamplers.

All functions take a Grid or an array shaped ``(..., H, W, C)`` and return
the same kind of object.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, TooSmall
from .grid import as_array, compensated_mean, like, to_blocks

METHODS = ("average-down", "nearest-up", "bilinear-up")


@dataclass(frozen=True)
class ResampleSpec:
    factor: int
    method: str = "average-down"

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError(f"factor must be >= 1, got {self.factor}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    def __call__(self, g):
        fn = {
            "average-down": downsample_avg,
            "nearest-up": upsample_nearest,
            "bilinear-up": upsample_bilinear,
        }[self.method]
        return fn(g, self.factor)


def downsample_avg(g, n: int):
    """Replace every ``n x n`` block by its mean, channel by channel."""
    x = as_array(g)
    if n < 1:
        raise ShapeMismatch(f"factor must be >= 1, got {n}")
    if x.shape[-3] % n or x.shape[-2] % n:
        raise ShapeMismatch(f"dims {x.shape[-3]}x{x.shape[-2]} not divisible by {n}")
    if n == 1:
        return like(g, x.astype(np.float64, copy=True))
    return like(g, compensated_mean(to_blocks(x, n)))


def upsample_nearest(g, n: int):
    x = as_array(g)
    return like(g, np.repeat(np.repeat(x, n, axis=-3), n, axis=-2))


def _linear_weights(size: int, n: int):
    # half-pixel alignment: output sample j sits at (j + 0.5) / n - 0.5
    s = (np.arange(size * n) + 0.5) / n - 0.5
    i0 = np.floor(s).astype(int)
    frac = s - i0
    return np.clip(i0, 0, size - 1), np.clip(i0 + 1, 0, size - 1), frac


def upsample_bilinear(g, n: int):
    """Separable bilinear interpolation, edge samples clamp-extended."""
    x = as_array(g).astype(np.float64)
    h, w = x.shape[-3], x.shape[-2]
    if h < 2 or w < 2:
        raise TooSmall(f"bilinear upsampling needs at least 2x2, got {h}x{w}")
    a, b, t = _linear_weights(h, n)
    t = t[:, None, None]
    x = np.take(x, a, axis=-3) * (1 - t) + np.take(x, b, axis=-3) * t
    a, b, t = _linear_weights(w, n)
    t = t[:, None]
    x = np.take(x, a, axis=-2) * (1 - t) + np.take(x, b, axis=-2) * t
    return like(g, x)
