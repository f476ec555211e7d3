"""Downsampling Enforcement: a blockwise correction that makes every ``N x N``
block of an HR field average exactly to its LR pixel.

For a block ``x`` with mean ``xbar`` and LR value ``P`` the corrected sample is

    f_i = x_i + alpha * (t - x_i),    alpha = (P - xbar) / (t - xbar)

where ``t = +1`` when the block must be raised (``xbar < P``), ``t = -1``
when it must be lowered (``xbar > P``), and ``alpha = 0`` when ``xbar == P``.
Each sample moves a fixed fraction of the way toward the bound on the side it
needs to go, so the block mean lands on ``P``, samples stay in ``[-1, 1]``
and their order is preserved.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import NotNormalized, OutOfRange
from .grid import BlockView, Grid, as_array, check_pair, compensated_mean, from_blocks, to_blocks

# backward treats |xbar - P| below this as the identity branch
BOUNDARY_TOL = 1e-12
# largest rounding overshoot past +-1 that the clamp may absorb
CLAMP_TOL = 1e-15

RAISE, IDENTITY, LOWER = "raise", "identity", "lower"


@dataclass(frozen=True)
class DEResult:
    y: np.ndarray
    correction_l1: float
    branch: str


def _check_unit_range(*arrays):
    for a in arrays:
        if a.size and np.abs(a).max() > 1.0:
            raise OutOfRange("DE inputs must lie in [-1, 1]")


def _targets(xbar, P):
    return np.where(xbar < P, 1.0, np.where(xbar > P, -1.0, 0.0))


def enforce_blocks(x: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Apply the correction to blocks ``x`` of shape ``(..., M)`` with LR values ``P`` of shape ``(...)``."""
    x = np.asarray(x, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    xbar = compensated_mean(x)
    t = _targets(xbar, P)
    # identity blocks get a dummy denominator and alpha = 0
    denom = np.where(t == 0.0, 1.0, t - xbar)
    alpha = np.where(t == 0.0, 0.0, (P - xbar) / denom)
    a = alpha[..., None]
    gap = t[..., None] - x
    # lerp evaluated from the nearer end: exact at alpha = 0 and alpha = 1
    y = np.where(a <= 0.5, x + a * gap, t[..., None] - (1.0 - a) * gap)
    overshoot = max(float(y.max(initial=-1.0)) - 1.0, -1.0 - float(y.min(initial=1.0)))
    if overshoot > CLAMP_TOL:
        raise FloatingPointError(f"DE output left [-1, 1] by {overshoot:.3g}")
    return np.clip(y, -1.0, 1.0)


def vjp_blocks(x: np.ndarray, P: np.ndarray, upstream: np.ndarray):
    """Vector-Jacobian product of :func:`enforce_blocks`.

    Returns ``(dx, dP)``. Includes the coupling between samples of a block
    that flows through the block mean, not only the diagonal.
    """
    x = np.asarray(x, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    u = np.asarray(upstream, dtype=np.float64)
    m = x.shape[-1]
    xbar = compensated_mean(x)
    t = np.where(xbar < P, 1.0, -1.0)
    boundary = np.abs(xbar - P) < BOUNDARY_TOL
    t = np.where(boundary, 1.0, t)
    gap = np.where(boundary, 1.0, t - xbar)
    alpha = np.where(boundary, 0.0, (P - xbar) / gap)
    # s = sum_i u_i * (t - x_i): how the block's output responds to alpha
    s = np.sum(u * (t[..., None] - x), axis=-1)
    dalpha_dxbar = (P - t) / gap**2
    coupling = np.where(boundary, 0.0, s * dalpha_dxbar / m)
    dx = u * (1.0 - alpha)[..., None] + coupling[..., None]
    dP = np.where(boundary, 0.0, s / gap)
    return dx, dP


def _branch(xbar, P):
    if xbar < P:
        return RAISE
    if xbar > P:
        return LOWER
    return IDENTITY


def de_forward(b: BlockView) -> DEResult:
    y = enforce_blocks(b.x, b.P)
    xbar = float(compensated_mean(b.x))
    return DEResult(y, float(np.mean(np.abs(y - b.x))), _branch(xbar, b.P))


def de_vjp(b: BlockView, upstream):
    u = np.asarray(upstream, dtype=np.float64).ravel()
    if u.size != b.x.size:
        raise ValueError(f"cotangent has {u.size} entries, block has {b.x.size}")
    dx, dP = vjp_blocks(b.x, b.P, u)
    return dx, float(dP)


def enforce(hr: np.ndarray, lr: np.ndarray, n: int) -> np.ndarray:
    """Array-level DE over ``(..., H, W, C)`` fields; always returns float64."""
    hr = np.asarray(hr)
    lr = np.asarray(lr)
    check_pair(hr, lr, n)
    _check_unit_range(hr, lr)
    return from_blocks(enforce_blocks(to_blocks(hr, n), lr), n)


def enforce_vjp(hr: np.ndarray, lr: np.ndarray, n: int, upstream: np.ndarray):
    """Cotangents of :func:`enforce` with respect to ``hr`` and ``lr``."""
    hr = np.asarray(hr)
    lr = np.asarray(lr)
    check_pair(hr, lr, n)
    dx, dP = vjp_blocks(to_blocks(hr, n), lr, to_blocks(np.asarray(upstream), n))
    return from_blocks(dx, n), dP


def _require_normalized(*grids):
    for g in grids:
        if isinstance(g, Grid) and not g.normalized:
            raise NotNormalized("DE operates on normalized grids")


def de_forward_grid(hr, lr, n: int) -> Grid:
    """Enforce conservation on every block of every channel."""
    _require_normalized(hr, lr)
    return Grid(enforce(as_array(hr), as_array(lr), n), normalized=True)


def correction_magnitude(hr_pre, lr, n: int) -> float:
    """Mean ``|x - f(x, P)|`` over all samples, on the ``[-1, 1]`` scale."""
    _require_normalized(hr_pre, lr)
    x = as_array(hr_pre)
    y = enforce(x, as_array(lr), n)
    return float(np.mean(np.abs(x - y)))


def correction_surface(x, P_samples) -> list[tuple[float, int, float, float]]:
    """Rows ``(P, i, x_i, f(x, P)_i - x_i)`` for every ``P`` and sample index ``i``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    _check_unit_range(x)
    P = np.asarray(P_samples, dtype=np.float64).ravel()
    _check_unit_range(P)
    xs = np.broadcast_to(x, (P.size, x.size))
    corr = enforce_blocks(xs, P) - xs
    return [
        (float(P[k]), i, float(x[i]), float(corr[k, i]))
        for k in range(P.size)
        for i in range(x.size)
    ]


def _fmt(v: float) -> str:
    # shortest text that reads back to the same double; +0.0 folds negative zero
    return repr(float(v) + 0.0)


def surface_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["P", "i", "x_i", "correction"])
    for P, i, xi, c in rows:
        w.writerow([_fmt(P), i, _fmt(xi), _fmt(c)])
    return buf.getvalue()


def evenly_spaced_block(n: int) -> np.ndarray:
    """``n`` samples evenly spaced on ``[-1, 1]`` with an exactly zero mean."""
    if n < 2:
        raise ValueError("need at least 2 samples")
    x = np.linspace(-1.0, 1.0, n)
    # exact antisymmetry makes the compensated mean exactly zero
    return (x - x[::-1]) / 2.0
