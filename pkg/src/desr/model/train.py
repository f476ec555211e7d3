"""Training loop: chip sampling with dihedral augmentation, Adam, validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ..errors import ConfigError, DivergedLoss, EmptyDataset, NoDELayer, NotSquare, ShapeMismatch
from ..grid import as_array
from ..resample import downsample_avg
from .losses import loss_de_regularized, loss_dual_resolution, loss_mse
from .network import ModelSpec, Tape, backward, forward, init_weights, srcnn_spec

LOSSES = ("mse", "dual_resolution", "de_regularized")
DEFAULT_LAMBDA = {"mse": 0.0, "dual_resolution": 16.0, "de_regularized": 100.0}


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "mse"
    lam: float | None = None
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    steps: int = 1000
    batch: int = 16
    chip: int = 48
    seed: int = 0
    factor: int = 4
    channels: int = 1
    de: bool = True
    widths: tuple[int, int] = (64, 32)
    kernels: tuple[int, int, int] = (9, 5, 5)
    val_every: int = 100
    augment: bool = True
    lr_drop: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.lam is None:
            object.__setattr__(self, "lam", DEFAULT_LAMBDA[self.loss])
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        for name in ("steps", "batch", "chip", "factor", "channels", "val_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.loss == "de_regularized" and not self.de:
            raise NoDELayer("de_regularized loss needs a model with a DE layer")

    @property
    def loss_name(self) -> str:
        return self.loss if self.loss == "mse" else f"{self.loss}({self.lam:g})"

    def model_spec(self) -> ModelSpec:
        return srcnn_spec(self.channels, self.factor, self.widths, self.kernels, self.de)


def _parse_value(f, raw):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if f.name in ("de", "augment", "lr_drop"):
        low = raw.lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if f.name in ("widths", "kernels"):
        return tuple(int(v) for v in raw.split(","))
    if f.name in ("lam", "lr", "beta1", "beta2", "eps"):
        return float(raw)
    if "int" in kind:
        return int(raw)
    return raw


_ALIASES = {"lambda": "lam", "learning_rate": "lr"}


def parse_config(text: str) -> TrainConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    by_name = {f.name: f for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in by_name:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        try:
            values[key] = _parse_value(by_name[key], raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
    try:
        return TrainConfig(**values)
    except (ConfigError, NoDELayer) as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "on" if v else "off"
        elif isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-7):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, weights, grads, lr):
        """Update ``weights`` in place."""
        if self.m is None:
            self.m = [{k: np.zeros_like(a) for k, a in w.items()} for w in weights]
            self.v = [{k: np.zeros_like(a) for k, a in w.items()} for w in weights]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for w, g, m, v in zip(weights, grads, self.m, self.v):
            for k in w:
                gk = g[k].astype(w[k].dtype, copy=False)
                m[k] *= self.beta1
                m[k] += (1.0 - self.beta1) * gk
                v[k] *= self.beta2
                v[k] += (1.0 - self.beta2) * gk * gk
                w[k] -= (lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)).astype(w[k].dtype)


def dihedral(x, k: int):
    """Element ``k`` of the 8-element symmetry group of the square, on axes ``(-3, -2)``."""
    y = np.rot90(x, k % 4, axes=(-3, -2))
    return np.flip(y, axis=-2) if k >= 4 else y


def dihedral_inverse(x, k: int):
    y = np.flip(x, axis=-2) if k >= 4 else x
    return np.rot90(y, -(k % 4), axes=(-3, -2))


def augment(pair, rng):
    """Apply one uniformly chosen dihedral transform to both chips of ``(lr, hr)``."""
    lr, hr = (as_array(a) for a in pair)
    for a in (lr, hr):
        if a.shape[-3] != a.shape[-2]:
            raise NotSquare(f"augmentation needs square chips, got {a.shape}")
    k = int(rng.integers(8))
    return np.ascontiguousarray(dihedral(lr, k)), np.ascontiguousarray(dihedral(hr, k))


@dataclass
class TrainResult:
    spec: ModelSpec
    weights: list
    log: list = field(default_factory=list)

    @property
    def final_val_mse(self) -> float:
        return [r for r in self.log if r["val_mse"] is not None][-1]["val_mse"]

    def val_mse_at(self, step: int) -> float:
        for r in self.log:
            if r["step"] == step and r["val_mse"] is not None:
                return r["val_mse"]
        raise KeyError(f"no validation at step {step}")


def validation_chips(images, chip: int, factor: int):
    """Non-overlapping ``(lr, hr)`` chips covering each image, stacked."""
    side = chip * factor
    los, his = [], []
    for img in images:
        a = as_array(img)
        for r in range(0, a.shape[0] - side + 1, side):
            for c in range(0, a.shape[1] - side + 1, side):
                hr = a[r : r + side, c : c + side]
                his.append(hr)
                los.append(downsample_avg(hr, factor))
    if not his:
        raise EmptyDataset(f"no validation image holds a {side}x{side} chip")
    return np.stack(los), np.stack(his)


def predict(spec, weights, lr_chips, batch: int = 64, with_pre=False):
    """Run the network over many chips in fixed-size batches."""
    outs, pres = [], []
    for i in range(0, len(lr_chips), batch):
        tape = Tape() if with_pre else None
        outs.append(forward(spec, weights, lr_chips[i : i + batch], tape))
        if with_pre:
            pres.append(tape.pre_de)
    y = np.concatenate(outs)
    return (y, np.concatenate(pres)) if with_pre else y


def validate(spec, weights, val):
    lr, hr = val
    err = float(np.mean((predict(spec, weights, lr) - hr) ** 2))
    # [-1, 1] spans 2, so peak^2 = 4 gives the same dB as 255^2 on 0-255
    return err, (math.inf if err == 0 else 10.0 * math.log10(4.0 / err))


def _sample_batch(images, cfg, rng):
    side = cfg.chip * cfg.factor
    his = []
    for _ in range(cfg.batch):
        a = images[int(rng.integers(len(images)))]
        r = int(rng.integers(a.shape[0] - side + 1))
        c = int(rng.integers(a.shape[1] - side + 1))
        his.append(a[r : r + side, c : c + side])
    his = np.stack(his)
    los = downsample_avg(his, cfg.factor).astype(his.dtype)
    if cfg.augment:
        pairs = [augment(pair, rng) for pair in zip(los, his)]
        los = np.stack([p[0] for p in pairs])
        his = np.stack([p[1] for p in pairs])
    return los, his


def compute_loss(spec, cfg, tape, out, lr, hr):
    """Loss value, output cotangent and any extra per-layer cotangents."""
    if cfg.loss == "mse":
        value, g = loss_mse(out, hr)
        return value, g, {}
    if cfg.loss == "dual_resolution":
        value, g = loss_dual_resolution(out, hr, cfg.lam, cfg.factor)
        return value, g, {}
    i = spec.de_index
    if i is None:
        raise NoDELayer("de_regularized loss needs a model with a DE layer")
    value, g, g_pre = loss_de_regularized(out, hr, tape.pre_de, lr, cfg.lam, cfg.factor)
    return value, g, {i - 1: g_pre}


def train(cfg: TrainConfig, dataset, val_images=None, spec=None, weights=None, log_fn=None) -> TrainResult:
    """Train from ``cfg`` on normalized HR images; deterministic for a fixed seed."""
    images = [np.asarray(as_array(g), dtype=cfg.dtype) for g in dataset]
    if not images:
        raise EmptyDataset("training needs at least one image")
    side = cfg.chip * cfg.factor
    images = [a for a in images if min(a.shape[:2]) >= side]
    if not images:
        raise EmptyDataset(f"no training image holds a {side}x{side} chip")
    if images[0].shape[2] != cfg.channels:
        raise ShapeMismatch(f"images have {images[0].shape[2]} channels, config says {cfg.channels}")
    spec = spec or cfg.model_spec()
    if cfg.loss == "de_regularized" and not spec.has_de:
        raise NoDELayer("de_regularized loss needs a model with a DE layer")
    init_rng, data_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    if weights is None:
        weights = init_weights(spec, init_rng, np.dtype(cfg.dtype))
    val = validation_chips([np.asarray(as_array(g), cfg.dtype) for g in val_images], cfg.chip, cfg.factor) if val_images else None
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    drop_at = (2 * cfg.steps) // 3 if cfg.lr_drop else cfg.steps + 1
    result = TrainResult(spec, weights)
    for step in range(1, cfg.steps + 1):
        lr, hr = _sample_batch(images, cfg, data_rng)
        tape = Tape()
        out = forward(spec, weights, lr, tape)
        value, g, extra = compute_loss(spec, cfg, tape, out, lr, hr)
        if not math.isfinite(value):
            raise DivergedLoss(f"loss became {value} at step {step}")
        grads = backward(tape, g, extra)
        rate = cfg.lr if step <= drop_at else cfg.lr / 10.0
        opt.step(weights, grads, rate)
        if not all(np.isfinite(a).all() for w in weights for a in w.values()):
            raise DivergedLoss(f"weights became non-finite at step {step}")
        row = {"step": step, "loss": value, "val_mse": None, "val_psnr": None}
        if val is not None and (step % cfg.val_every == 0 or step == cfg.steps):
            row["val_mse"], row["val_psnr"] = validate(spec, weights, val)
        result.log.append(row)
        if log_fn is not None:
            log_fn(row)
    return result


def log_csv(result: TrainResult, cfg: TrainConfig) -> str:
    """Training log as CSV, preceded by one ``#`` line naming the loss."""
    lines = [f"# loss={cfg.loss_name} seed={cfg.seed} de={'on' if result.spec.has_de else 'off'}",
             "step,loss,val_mse,val_psnr"]
    for r in result.log:
        vm = "" if r["val_mse"] is None else f"{r['val_mse']:.9g}"
        vp = "" if r["val_psnr"] is None else f"{r['val_psnr']:.9g}"
        lines.append(f"{r['step']},{r['loss']:.9g},{vm},{vp}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
