"""CSRW weight checkpoints.

Layout (little-endian)::

    b"CSRW"  u32 version  u32 layer count
    per layer: u32 kind code, then
        conv2d:                  u32 in, u32 out, u32 kernel,
                                 float32 kernel[k, k, in, out], float32 bias[out]
        pixel_shuffle, de_layer: u32 factor
        tanh, relu:              nothing
"""

import struct

import numpy as np

from ..errors import FormatError
from .network import KINDS, LayerSpec, ModelSpec

MAGIC = b"CSRW"
VERSION = 1
_U32 = struct.Struct("<I")


def save_checkpoint(path, spec: ModelSpec, weights) -> None:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(spec))]
    for layer, w in zip(spec, weights):
        parts.append(_U32.pack(KINDS.index(layer.kind)))
        if layer.kind == "conv2d":
            parts.append(struct.pack("<III", layer.in_channels, layer.out_channels, layer.kernel))
            parts.append(np.ascontiguousarray(w["kernel"], dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(w["bias"], dtype="<f4").tobytes())
        elif layer.kind in ("pixel_shuffle", "de_layer"):
            parts.append(_U32.pack(layer.factor))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def f32(self, count):
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def load_checkpoint(path, dtype=np.float32):
    """Return ``(spec, weights)``."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a CSRW checkpoint")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    layers, weights = [], []
    for _ in range(r.u32()):
        code = r.u32()
        if code >= len(KINDS):
            raise FormatError(f"{path}: unknown layer code {code}")
        kind = KINDS[code]
        if kind == "conv2d":
            cin, cout, k = r.u32(), r.u32(), r.u32()
            layers.append(LayerSpec(kind, in_channels=cin, out_channels=cout, kernel=k))
            kernel = r.f32(k * k * cin * cout).reshape(k, k, cin, cout)
            bias = r.f32(cout)
            weights.append({"kernel": kernel.astype(dtype), "bias": bias.astype(dtype)})
        elif kind in ("pixel_shuffle", "de_layer"):
            layers.append(LayerSpec(kind, factor=r.u32()))
            weights.append({})
        else:
            layers.append(LayerSpec(kind))
            weights.append({})
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: trailing bytes after the last layer")
    try:
        spec = ModelSpec(tuple(layers))
    except ValueError as exc:
        raise FormatError(f"{path}: invalid model: {exc}") from None
    return spec, weights
