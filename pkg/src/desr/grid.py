"""Dense grids, value normalization and block/tile bookkeeping.

Every array in this package follows the same layout: row-major samples
with channels last, i.e. ``(height, width, channels)`` for a single grid
and ``(batch, height, width, channels)`` for batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChipTooLarge,
    CoverageGap,
    DegenerateRange,
    NotNormalized,
    OutOfRange,
    ShapeMismatch,
)

# samples this close outside [lo, hi] are clamped instead of rejected
RANGE_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    """A ``(height, width, channels)`` array plus a normalization flag.

    Two-dimensional input is promoted to a single channel.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatch(f"grid needs shape (H, W, C), got {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        object.__setattr__(self, "data", data)
        if self.normalized and data.size and np.abs(data).max() > 1.0:
            raise OutOfRange("normalized grid has samples outside [-1, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, normalized=None) -> "Grid":
        return Grid(data, self.normalized if normalized is None else normalized)


def as_array(g):
    """Return the sample array behind a Grid, or the array itself."""
    if isinstance(g, Grid):
        return g.data
    return np.asarray(g)


def like(template, data):
    """Wrap ``data`` the same way ``template`` was wrapped."""
    if isinstance(template, Grid):
        return Grid(data, template.normalized)
    return data


def normalize(g, lo: float, hi: float) -> Grid:
    """Affinely map samples from ``[lo, hi]`` onto ``[-1, 1]``."""
    if not hi > lo:
        raise DegenerateRange(f"need hi > lo, got lo={lo}, hi={hi}")
    x = as_array(g).astype(np.float64)
    span = hi - lo
    tol = RANGE_TOL * max(1.0, abs(lo), abs(hi))
    if x.size and (x.min() < lo - tol or x.max() > hi + tol):
        raise OutOfRange(
            f"samples span [{x.min()}, {x.max()}], outside [{lo}, {hi}]"
        )
    y = 2.0 * (x - lo) / span - 1.0
    return Grid(np.clip(y, -1.0, 1.0), normalized=True)


def denormalize(g, lo: float, hi: float) -> Grid:
    if not hi > lo:
        raise DegenerateRange(f"need hi > lo, got lo={lo}, hi={hi}")
    if isinstance(g, Grid) and not g.normalized:
        raise NotNormalized("denormalize expects a normalized grid")
    y = as_array(g).astype(np.float64)
    return Grid((y + 1.0) * 0.5 * (hi - lo) + lo, normalized=False)


def compensated_sum(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Neumaier-compensated sum along ``axis`` in a fixed element order.

    Vectorized across the remaining axes, so results do not depend on how
    blocks are batched.
    """
    a = np.ascontiguousarray(np.moveaxis(np.asarray(a, dtype=np.float64), axis, 0))
    total = a[0].copy()
    comp = np.zeros_like(total)
    for v in a[1:]:
        t = total + v
        comp += np.where(np.abs(total) >= np.abs(v), (total - t) + v, (v - t) + total)
        total = t
    return total + comp


def compensated_mean(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Compensated mean with one residual-correction pass.

    The correction makes the mean of ``m`` equal samples come out exactly
    equal to the sample, which plain ``sum / m`` does not guarantee.
    """
    a = np.asarray(a, dtype=np.float64)
    m = a.shape[axis]
    mean = compensated_sum(a, axis) / m
    resid = compensated_sum(a - np.expand_dims(mean, axis), axis) / m
    return mean + resid


def to_blocks(x: np.ndarray, n: int) -> np.ndarray:
    """Rearrange ``(..., H, W, C)`` into ``(..., H/n, W/n, C, n*n)``.

    The last axis enumerates each block row-major.
    """
    *lead, h, w, c = x.shape
    if h % n or w % n:
        raise ShapeMismatch(f"dims {h}x{w} are not multiples of {n}")
    k = len(lead)
    b = x.reshape(*lead, h // n, n, w // n, n, c)
    perm = list(range(k)) + [k, k + 2, k + 4, k + 1, k + 3]
    return b.transpose(perm).reshape(*lead, h // n, w // n, c, n * n)


def from_blocks(b: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`to_blocks`."""
    *lead, hb, wb, c, m = b.shape
    k = len(lead)
    x = b.reshape(*lead, hb, wb, c, n, n)
    perm = list(range(k)) + [k, k + 3, k + 1, k + 4, k + 2]
    return x.transpose(perm).reshape(*lead, hb * n, wb * n, c)


def check_pair(hr: np.ndarray, lr: np.ndarray, n: int) -> None:
    if n < 1:
        raise ShapeMismatch(f"factor must be >= 1, got {n}")
    if hr.ndim != lr.ndim:
        raise ShapeMismatch(f"rank mismatch: {hr.shape} vs {lr.shape}")
    expected = lr.shape[:-3] + (lr.shape[-3] * n, lr.shape[-2] * n, lr.shape[-1])
    if hr.shape != expected:
        raise ShapeMismatch(f"hr shape {hr.shape} is not {n}x lr shape {lr.shape}")


@dataclass(frozen=True)
class BlockView:
    """One LR pixel ``P`` and its ``N*N`` HR samples ``x`` (row-major)."""

    x: np.ndarray
    P: float
    N: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).ravel()
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "P", float(self.P))
        if self.N < 1 or x.size != self.N * self.N:
            raise ShapeMismatch(f"block of {x.size} samples does not match N={self.N}")
        if np.abs(x).max() > 1.0 or abs(self.P) > 1.0:
            raise OutOfRange("block samples and P must lie in [-1, 1]")


def extract_blocks(hr, lr, n: int) -> list[BlockView]:
    """Split an HR/LR pair into blocks, row-major by LR pixel then channel."""
    if isinstance(hr, Grid) and not hr.normalized or isinstance(lr, Grid) and not lr.normalized:
        raise NotNormalized("extract_blocks expects normalized grids")
    h, l = as_array(hr), as_array(lr)
    check_pair(h, l, n)
    blocks = to_blocks(h, n)
    return [
        BlockView(blocks[r, c, ch], l[r, c, ch], n)
        for r in range(l.shape[0])
        for c in range(l.shape[1])
        for ch in range(l.shape[2])
    ]


def _axis_origins(size: int, chip: int, stride: int) -> list[int]:
    origins = list(range(0, size - chip + 1, stride))
    if origins[-1] != size - chip:
        origins.append(size - chip)
    return origins


@dataclass(frozen=True)
class TileSet:
    """Overlapping chips of a grid, with the information needed to reassemble.

    ``origins`` are ``(row, col)`` pairs in row-major order of the row and
    column origin lists. Chips never leave the source grid; the last origin
    on each axis is clamped to ``size - chip``.
    """

    chip: int
    stride: int
    height: int
    width: int
    row_origins: tuple[int, ...]
    col_origins: tuple[int, ...]
    origins: tuple[tuple[int, int], ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self,
            "origins",
            tuple((r, c) for r in self.row_origins for c in self.col_origins),
        )

    @property
    def center(self) -> int:
        return self.chip // 2

    @property
    def center_offset(self) -> int:
        return (self.chip - self.center) // 2

    @property
    def scored_box(self) -> tuple[int, int, int, int]:
        """``(row0, row1, col0, col1)`` of the scored area, LR pixels, half-open."""
        off, cw = self.center_offset, self.center
        return (
            self.row_origins[0] + off,
            self.row_origins[-1] + off + cw,
            self.col_origins[0] + off,
            self.col_origins[-1] + off + cw,
        )

    def __len__(self):
        return len(self.origins)

    def crops(self, g):
        """Cut the chips out of ``g`` (Grid or array) in ``origins`` order."""
        x = as_array(g)
        return [like(g, x[r : r + self.chip, c : c + self.chip]) for r, c in self.origins]


def tile(g, chip: int, stride: int) -> TileSet:
    x = as_array(g)
    h, w = x.shape[0], x.shape[1]
    if chip < 1 or chip > min(h, w):
        raise ChipTooLarge(f"chip {chip} does not fit in a {h}x{w} grid")
    if not 0 < stride <= chip:
        raise ValueError(f"stride must be in (0, {chip}], got {stride}")
    return TileSet(
        chip,
        stride,
        h,
        w,
        tuple(_axis_origins(h, chip, stride)),
        tuple(_axis_origins(w, chip, stride)),
    )


def _owners(origins, start, stop, off, cw):
    # first chip whose center window holds each coordinate
    owner = np.full(stop - start, -1, dtype=int)
    for k in range(len(origins) - 1, -1, -1):
        lo = origins[k] + off - start
        owner[lo : lo + cw] = k
    return owner


def assemble_centers(tiles: TileSet, outputs, n: int) -> Grid:
    """Stitch the center crop of every chip output into the scored HR grid.

    Each scored pixel is taken from exactly one chip: the first one, in
    origin order, whose center window contains it.
    """
    outs = [as_array(o) for o in outputs]
    if len(outs) != len(tiles):
        raise ShapeMismatch(f"{len(tiles)} tiles but {len(outs)} outputs")
    side = n * tiles.chip
    for o in outs:
        if o.shape[:2] != (side, side):
            raise ShapeMismatch(f"chip output {o.shape[:2]} is not {side}x{side}")
    if len({o.shape[2] for o in outs}) != 1:
        raise ShapeMismatch("chip outputs disagree on channel count")
    r0, r1, c0, c1 = tiles.scored_box
    off, cw = tiles.center_offset, tiles.center
    row_owner = _owners(tiles.row_origins, r0, r1, off, cw)
    col_owner = _owners(tiles.col_origins, c0, c1, off, cw)
    if (row_owner < 0).any() or (col_owner < 0).any():
        raise CoverageGap(
            f"stride {tiles.stride} leaves gaps between {cw}-pixel chip centers"
        )
    result = np.empty((n * (r1 - r0), n * (c1 - c0), outs[0].shape[2]), dtype=outs[0].dtype)
    ncols = len(tiles.col_origins)
    for rr in range(r1 - r0):
        ki = row_owner[rr]
        src_r = (r0 + rr - tiles.row_origins[ki]) * n
        for cc in range(c1 - c0):
            kj = col_owner[cc]
            src_c = (c0 + cc - tiles.col_origins[kj]) * n
            chip = outs[ki * ncols + kj]
            result[rr * n : (rr + 1) * n, cc * n : (cc + 1) * n] = chip[
                src_r : src_r + n, src_c : src_c + n
            ]
    normalized = all(isinstance(o, Grid) and o.normalized for o in outputs)
    return Grid(result, normalized=normalized)
