"""A small sequential SR network with a reverse-mode tape.

Layers run on NHWC batches. ``forward`` optionally records, for every layer,
a closure mapping the cotangent of the layer output to the cotangent of its
input and of its parameters. ``backward`` replays those closures in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..de import enforce, enforce_vjp
from ..errors import NoTape, ShapeMismatch

KINDS = ("conv2d", "tanh", "relu", "pixel_shuffle", "de_layer")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    factor: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ValueError(f"conv2d kernel must be odd, got {self.kernel}")
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError("conv2d needs positive channel counts")
        if self.kind in ("pixel_shuffle", "de_layer") and self.factor < 1:
            raise ValueError(f"{self.kind} needs factor >= 1")


def conv(cin, cout, k):
    return LayerSpec("conv2d", in_channels=cin, out_channels=cout, kernel=k)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        validate(self.layers)

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    @property
    def channels(self) -> int:
        return next(l.in_channels for l in self.layers if l.kind == "conv2d")

    @property
    def factor(self) -> int:
        n = 1
        for l in self.layers:
            if l.kind == "pixel_shuffle":
                n *= l.factor
        return n

    @property
    def de_index(self):
        for i, l in enumerate(self.layers):
            if l.kind == "de_layer":
                return i
        return None

    @property
    def has_de(self) -> bool:
        return self.de_index is not None

    def without_de(self) -> "ModelSpec":
        return ModelSpec(tuple(l for l in self.layers if l.kind != "de_layer"))

    def n_params(self) -> int:
        return sum(
            l.kernel * l.kernel * l.in_channels * l.out_channels + l.out_channels
            for l in self.layers
            if l.kind == "conv2d"
        )


def validate(layers) -> None:
    if not layers:
        raise ValueError("empty model")
    if layers[0].kind != "conv2d":
        raise ValueError("the first layer must be conv2d")
    channels = layers[0].in_channels
    in_channels = channels
    factor = 1
    de_seen = False
    for i, l in enumerate(layers):
        if de_seen:
            raise ValueError("de_layer must be the last layer")
        if l.kind == "conv2d":
            if l.in_channels != channels:
                raise ValueError(f"layer {i}: expects {l.in_channels} channels, gets {channels}")
            channels = l.out_channels
        elif l.kind == "pixel_shuffle":
            if channels % (l.factor * l.factor):
                raise ValueError(f"layer {i}: {channels} channels not divisible by {l.factor}^2")
            channels //= l.factor * l.factor
            factor *= l.factor
        elif l.kind == "de_layer":
            if i == 0 or layers[i - 1].kind != "tanh":
                raise ValueError("de_layer must directly follow a tanh")
            if l.factor != factor:
                raise ValueError(f"de_layer factor {l.factor} != upsampling factor {factor}")
            de_seen = True
    if channels != in_channels:
        raise ValueError(f"model maps {in_channels} channels to {channels}")


def srcnn_spec(channels=1, factor=4, widths=(64, 32), kernels=(9, 5, 5), de=True) -> ModelSpec:
    """Three convolutions with ReLU, a pixel-shuffle head, tanh and optionally DE."""
    w1, w2 = widths
    k1, k2, k3 = kernels
    layers = [
        conv(channels, w1, k1),
        LayerSpec("relu"),
        conv(w1, w2, k2),
        LayerSpec("relu"),
        conv(w2, channels * factor * factor, k3),
        LayerSpec("pixel_shuffle", factor=factor),
        LayerSpec("tanh"),
    ]
    if de:
        layers.append(LayerSpec("de_layer", factor=factor))
    return ModelSpec(tuple(layers))


def _truncated_normal(rng, shape, std):
    w = rng.standard_normal(shape)
    bad = np.abs(w) > 2.0
    while bad.any():
        w[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(w) > 2.0
    return w * std


def init_weights(spec: ModelSpec, rng, dtype=np.float32, icnr: bool = True):
    """Truncated-normal fan-in initialization (2 std cutoff), zero biases.

    With ``icnr`` a conv that feeds a pixel shuffle starts with the same
    kernel for every sub-pixel offset, so the untrained head behaves like
    nearest-neighbour upsampling and carries no in-block structure.
    """
    weights = []
    for i, l in enumerate(spec):
        if l.kind != "conv2d":
            weights.append({})
            continue
        fan_in = l.kernel * l.kernel * l.in_channels
        std = np.sqrt(2.0 / fan_in)
        nxt = spec[i + 1] if i + 1 < len(spec) else None
        if icnr and nxt is not None and nxt.kind == "pixel_shuffle":
            r2 = nxt.factor * nxt.factor
            base = _truncated_normal(rng, (l.kernel, l.kernel, l.in_channels, l.out_channels // r2), std)
            # channel (dy*r + dx)*C + c maps to sub-pixel (dy, dx) of output channel c
            w = np.tile(base, (1, 1, 1, r2))
        else:
            w = _truncated_normal(rng, (l.kernel, l.kernel, l.in_channels, l.out_channels), std)
        weights.append({"kernel": w.astype(dtype), "bias": np.zeros(l.out_channels, dtype=dtype)})
    return weights


def _conv_matrix(kernel):
    k, _, cin, cout = kernel.shape
    return kernel.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)


def _im2col(x, k):
    p = k // 2
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    return sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(b * h * w, c * k * k)


def _conv2d(layer, params, x, lr, first=False):
    k = layer.kernel
    b, h, w, c = x.shape
    if c != layer.in_channels:
        raise ShapeMismatch(f"conv2d expects {layer.in_channels} channels, got {c}")
    cols = _im2col(x, k)
    wm = _conv_matrix(params["kernel"])
    out = (cols @ wm + params["bias"]).reshape(b, h, w, -1)

    def back(g):
        g2 = g.reshape(b * h * w, -1)
        grads = {
            "kernel": (cols.T @ g2).reshape(c, k, k, -1).transpose(1, 2, 0, 3),
            "bias": g2.sum(axis=0),
        }
        if first:
            return None, grads
        # input cotangent: correlate g with the spatially flipped, transposed kernel
        flipped = params["kernel"][::-1, ::-1].transpose(0, 1, 3, 2)
        dx = (_im2col(g, k) @ _conv_matrix(flipped)).reshape(b, h, w, c)
        return dx, grads

    return out, back


def _tanh(layer, params, x, lr):
    y = np.tanh(x)
    return y, lambda g: (g * (1.0 - y * y), {})


def _relu(layer, params, x, lr):
    mask = x > 0
    return x * mask, lambda g: (g * mask, {})


def pixel_shuffle(x, r):
    """``(B, h, w, C*r*r) -> (B, h*r, w*r, C)``; channel ``(dy*r + dx)*C + c`` lands at offset ``(dy, dx)``."""
    b, h, w, cr = x.shape
    c = cr // (r * r)
    return x.reshape(b, h, w, r, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h * r, w * r, c)


def pixel_unshuffle(y, r):
    b, hr, wr, c = y.shape
    h, w = hr // r, wr // r
    return y.reshape(b, h, r, w, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, r * r * c)


def _pixel_shuffle(layer, params, x, lr):
    r = layer.factor
    return pixel_shuffle(x, r), lambda g: (pixel_unshuffle(g, r), {})


def _de_layer(layer, params, x, lr):
    n = layer.factor
    y = enforce(x, lr, n)

    def back(g):
        dx, _ = enforce_vjp(x, lr, n, g)
        return dx.astype(x.dtype, copy=False), {}

    return y, back


_FORWARD = {
    "conv2d": _conv2d,
    "tanh": _tanh,
    "relu": _relu,
    "pixel_shuffle": _pixel_shuffle,
    "de_layer": _de_layer,
}


class Tape:
    """Per-layer backward closures and activations from one forward pass."""

    def __init__(self):
        self.spec = None
        self.backs = []
        self.activations = []

    def record(self, back, out):
        self.backs.append(back)
        self.activations.append(out)

    @property
    def pre_de(self):
        """Activation entering the DE layer (the tanh output)."""
        i = self.spec.de_index if self.spec is not None else None
        if i is None:
            return None
        return self.activations[i - 1]


def forward(spec: ModelSpec, weights, lr_batch, tape: Tape | None = None):
    """Run the network on an ``(B, h, w, C)`` batch of normalized LR chips."""
    lr_batch = np.asarray(lr_batch)
    if lr_batch.ndim == 3:
        lr_batch = lr_batch[None]
    if lr_batch.ndim != 4 or lr_batch.shape[-1] != spec.channels:
        raise ShapeMismatch(f"expected (B, h, w, {spec.channels}) input, got {lr_batch.shape}")
    if len(weights) != len(spec):
        raise ShapeMismatch(f"{len(weights)} weight entries for {len(spec)} layers")
    dtype = next((w["kernel"].dtype for w in weights if w), np.float64)
    x = lr_batch.astype(dtype, copy=False)
    if tape is not None:
        tape.spec = spec
        tape.backs.clear()
        tape.activations.clear()
    for i, (layer, params) in enumerate(zip(spec, weights)):
        if i == 0:
            x, back = _conv2d(layer, params, x, lr_batch, first=True)
        else:
            x, back = _FORWARD[layer.kind](layer, params, x, lr_batch)
        if tape is not None:
            tape.record(back, x)
    return x


def backward(tape: Tape | None, grad_output, extra=None):
    """Gradients of a scalar loss with respect to every weight.

    ``grad_output`` is the loss cotangent at the network output. ``extra``
    maps a layer index to an additional cotangent for that layer's output,
    e.g. a penalty on the activation entering the DE layer.
    """
    if tape is None or not tape.backs:
        raise NoTape("backward needs a forward pass recorded on a Tape")
    extra = extra or {}
    grads = [None] * len(tape.backs)
    g = np.asarray(grad_output)
    for i in range(len(tape.backs) - 1, -1, -1):
        if i in extra:
            g = g + extra[i]
        act = tape.activations[i]
        g, grads[i] = tape.backs[i](g.astype(act.dtype, copy=False))
    return grads


def pre_de_index(spec: ModelSpec):
    i = spec.de_index
    return None if i is None else i - 1
