"""Reading and writing 8-bit PNG images and raw CSRG float grids.

CSRG layout (all little-endian)::

    offset 0   4 bytes   magic b"CSRG"
    offset 4   u32       height
    offset 8   u32       width
    offset 12  u32       channels
    offset 16  float32[height * width * channels], row-major, channels last
"""

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .grid import as_array

CSRG_MAGIC = b"CSRG"
_HEADER = struct.Struct("<4sIII")
EXTENSIONS = (".png", ".csrg")


def kind_of(path) -> str:
    ext = Path(path).suffix.lower()
    if ext not in EXTENSIONS:
        raise FormatError(f"{path}: unsupported extension {ext!r} (use .png or .csrg)")
    return ext[1:]


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "P":
            im = im.convert("RGB")
        if im.mode not in ("L", "RGB"):
            raise FormatError(f"{path}: only 8-bit grayscale or RGB PNG is supported, got {im.mode}")
        a = np.asarray(im, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    return a


def write_png(path, g) -> None:
    a = as_array(g)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    elif a.ndim != 3 or a.shape[2] != 3:
        if a.ndim != 2:
            raise FormatError(f"PNG needs 1 or 3 channels, got shape {a.shape}")
    Image.fromarray(np.clip(np.rint(a), 0, 255).astype(np.uint8)).save(path)


def read_csrg(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the 16-byte header")
    magic, h, w, c = _HEADER.unpack_from(raw)
    if magic != CSRG_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    count = h * w * c
    if len(raw) != _HEADER.size + 4 * count:
        raise FormatError(f"{path}: expected {count} samples after the header")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=count)
    return data.astype(np.float64).reshape(h, w, c)


def write_csrg(path, g) -> None:
    a = as_array(g)
    if a.ndim == 2:
        a = a[:, :, None]
    h, w, c = a.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CSRG_MAGIC, h, w, c))
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_grid(path) -> np.ndarray:
    """Read a ``.png`` or ``.csrg`` file into a float64 ``(H, W, C)`` array."""
    return read_png(path) if kind_of(path) == "png" else read_csrg(path)


def write_grid(path, g) -> None:
    if kind_of(path) == "png":
        write_png(path, g)
    else:
        write_csrg(path, g)
