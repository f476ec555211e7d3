"""Image-quality metrics on the 0-255 scale: MSE, luma PSNR and SSIM."""

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ChannelMismatch, ShapeMismatch, TooSmall
from .grid import as_array

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    mse: float
    psnr_db: float
    ssim: float
    n_pixels: int

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr_db)


def _pair(a, b):
    a = np.asarray(as_array(a), dtype=np.float64)
    b = np.asarray(as_array(b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, peak: float = PEAK) -> float:
    """``10 log10(peak^2 / mse)``; exactly ``inf`` when ``mse == 0``."""
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def rgb_to_y(g) -> np.ndarray:
    """BT.601 studio-range luma of an RGB array on the 0-255 scale."""
    a = np.asarray(as_array(g), dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ChannelMismatch(f"rgb_to_y needs 3 channels, got shape {a.shape}")
    r, g_, b = a[..., 0], a[..., 1], a[..., 2]
    return (16.0 + (65.481 * r + 128.553 * g_ + 24.966 * b) / 255.0)[..., None]


def intensity(g) -> np.ndarray:
    """Luma for RGB input; single-channel input is already an intensity."""
    a = np.asarray(as_array(g), dtype=np.float64)
    if a.ndim == 2:
        return a[..., None]
    if a.shape[2] == 1:
        return a
    return rgb_to_y(a)


def psnr_y(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return psnr_from_mse(mse(intensity(p), intensity(t)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian taps; the 2D window is its outer product."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = taps.size
    x = sliding_window_view(x, k, axis=0) @ taps
    return sliding_window_view(x, k, axis=1) @ taps


def _plane(g) -> np.ndarray:
    a = np.asarray(as_array(g), dtype=np.float64)
    if a.ndim == 3:
        if a.shape[2] != 1:
            raise ChannelMismatch(f"ssim takes one channel, got {a.shape[2]}")
        a = a[:, :, 0]
    return a


def ssim(pred, truth, peak: float = PEAK) -> float:
    """Mean local SSIM over all fully-contained 11x11 Gaussian windows."""
    x, y = _plane(pred), _plane(truth)
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise TooSmall(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    taps = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mx = _filter_valid(x, taps)
    my = _filter_valid(y, taps)
    vx = _filter_valid(x * x, taps) - mx * mx
    vy = _filter_valid(y * y, taps) - my * my
    cxy = _filter_valid(x * y, taps) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def evaluate(pred, truth) -> MetricReport:
    """All metrics for one image pair on the 0-255 scale; SSIM is taken on luma."""
    p, t = _pair(pred, truth)
    yp, yt = intensity(p), intensity(t)
    err = mse(p, t)
    return MetricReport(
        mse=err,
        psnr_db=psnr_from_mse(mse(yp, yt)),
        ssim=ssim(yp, yt),
        n_pixels=p.shape[0] * p.shape[1],
    )
