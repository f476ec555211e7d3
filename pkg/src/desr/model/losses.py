"""Training losses. Each returns the scalar value and its gradient(s)."""

import numpy as np

from ..de import enforce, enforce_vjp
from ..errors import ShapeMismatch
from ..resample import downsample_avg, upsample_nearest


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"shapes differ: {pred.shape} vs {truth.shape}")
    return pred, truth


def loss_mse(pred, truth):
    pred, truth = _pair(pred, truth)
    d = pred - truth
    return float(np.mean(d * d)), 2.0 * d / d.size


def loss_dual_resolution(pred, truth, lam, factor=4):
    """MSE plus ``lam`` times the MSE between ``factor``-downsampled fields."""
    pred, truth = _pair(pred, truth)
    value, grad = loss_mse(pred, truth)
    dlow = downsample_avg(pred, factor) - downsample_avg(truth, factor)
    value += lam * float(np.mean(dlow * dlow))
    # transpose of block averaging: replicate and divide by the block size
    grad = grad + lam * upsample_nearest(2.0 * dlow / dlow.size, factor) / factor**2
    return value, grad


def loss_de_regularized(pred_final, truth, pred_pre_de, lr, lam, factor):
    """MSE on the final output plus ``lam`` times the mean DE correction.

    Returns ``(value, grad_final, grad_pre_de)``. The correction is recomputed
    from ``pred_pre_de`` and ``lr``, so its gradient reaches the pre-DE
    activation both directly and through the DE operator. The subgradient of
    ``|.|`` at zero is zero.
    """
    value, grad_final = loss_mse(pred_final, truth)
    x = np.asarray(pred_pre_de, dtype=np.float64)
    diff = x - enforce(x, lr, factor)
    value += lam * float(np.mean(np.abs(diff)))
    s = lam * np.sign(diff) / diff.size
    through_de, _ = enforce_vjp(x, lr, factor, s)
    return value, grad_final, s - through_de
