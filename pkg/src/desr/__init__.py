"""Super-resolution with an exact downsampling-consistency layer.

The core piece is :mod:`desr.de`, a blockwise operator that forces every
``N x N`` block of a high-resolution field to average to the matching
low-resolution pixel while keeping samples in ``[-1, 1]``.
"""

from .de import correction_magnitude, correction_surface, de_forward, de_forward_grid, de_vjp, enforce
from .grid import BlockView, Grid, denormalize, normalize, tile, assemble_centers
from .metrics import MetricReport, evaluate, mse, psnr_y, ssim
from .resample import downsample_avg, upsample_bilinear, upsample_nearest

__version__ = "0.1.0"
