import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from desr.de import enforce, enforce_vjp
from desr.errors import (
    ConfigError,
    DivergedLoss,
    EmptyDataset,
    FormatError,
    NoDELayer,
    NoTape,
    NotSquare,
    ShapeMismatch,
)
from desr.model import (
    Adam,
    LayerSpec,
    ModelSpec,
    Tape,
    TrainConfig,
    augment,
    backward,
    dihedral,
    dihedral_inverse,
    forward,
    init_weights,
    load_checkpoint,
    log_csv,
    loss_de_regularized,
    loss_dual_resolution,
    loss_mse,
    parse_config,
    pixel_shuffle,
    pixel_unshuffle,
    save_checkpoint,
    srcnn_spec,
    train,
)
from desr.model.network import conv
from desr.model.train import format_config
from desr.resample import downsample_avg, upsample_nearest


def tiny_spec(de=True, factor=2):
    return srcnn_spec(channels=1, factor=factor, widths=(3, 2), kernels=(3, 3, 3), de=de)


def lr_batch(rng, b=2, h=3, w=3, c=1):
    return rng.uniform(-0.9, 0.9, (b, h, w, c))


def directional_check(spec, weights, x, rng, h=1e-6):
    """Compare <grad, v> with a central difference along a random direction, per layer."""
    probe = rng.standard_normal(forward(spec, weights, x).shape)
    tape = Tape()
    forward(spec, weights, x, tape)
    grads = backward(tape, probe)

    def loss(ws):
        return float(np.sum(forward(spec, ws, x) * probe))

    checked = 0
    for i, w in enumerate(weights):
        for key in w:
            v = rng.standard_normal(w[key].shape)
            plus = [{k: a.copy() for k, a in ww.items()} for ww in weights]
            minus = [{k: a.copy() for k, a in ww.items()} for ww in weights]
            plus[i][key] += h * v
            minus[i][key] -= h * v
            fd = (loss(plus) - loss(minus)) / (2 * h)
            an = float(np.sum(grads[i][key] * v))
            assert an == pytest.approx(fd, rel=1e-7, abs=1e-9), (i, key)
            checked += 1
    return checked


# --- architecture ----------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec((conv(1, 4, 3), LayerSpec("pixel_shuffle", factor=2), LayerSpec("de_layer", factor=2)))
    with pytest.raises(ValueError):
        LayerSpec("conv2d", in_channels=1, out_channels=1, kernel=4)
    with pytest.raises(ValueError):
        ModelSpec((conv(1, 4, 3), LayerSpec("pixel_shuffle", factor=2), LayerSpec("tanh"), LayerSpec("de_layer", factor=4)))
    spec = tiny_spec()
    assert spec.has_de and spec.factor == 2 and spec.channels == 1
    assert not spec.without_de().has_de


def test_output_shape_and_conservation(rng):
    spec = srcnn_spec(channels=3, factor=4, widths=(8, 4), kernels=(3, 3, 3))
    w = init_weights(spec, rng)
    x = lr_batch(rng, 2, 5, 6, 3)
    y = forward(spec, w, x)
    assert y.shape == (2, 20, 24, 3)
    assert np.abs(downsample_avg(y.astype(np.float64), 4) - x).max() <= 1e-12


def test_conservation_after_training_steps(rng):
    spec = tiny_spec()
    images = [rng.uniform(-1, 1, (12, 12, 1)) for _ in range(2)]
    cfg = TrainConfig(steps=3, batch=2, chip=3, factor=2, widths=(3, 2), kernels=(3, 3, 3), lr=1e-2)
    res = train(cfg, images)
    x = lr_batch(rng)
    assert np.abs(downsample_avg(forward(spec, res.weights, x).astype(np.float64), 2) - x).max() <= 1e-12


def test_zero_weights_no_de_gives_zero(rng):
    spec = tiny_spec(de=False)
    w = [{k: np.zeros_like(a) for k, a in d.items()} for d in init_weights(spec, rng)]
    assert not forward(spec, w, lr_batch(rng)).any()


def test_zero_weights_with_de_gives_lr(rng):
    spec = tiny_spec()
    w = [{k: np.zeros_like(a) for k, a in d.items()} for d in init_weights(spec, rng, np.float64)]
    x = lr_batch(rng)
    np.testing.assert_allclose(forward(spec, w, x), upsample_nearest(x, 2), rtol=0, atol=1e-15)


def test_forward_shape_errors(rng):
    spec = tiny_spec()
    w = init_weights(spec, rng)
    with pytest.raises(ShapeMismatch):
        forward(spec, w, np.zeros((1, 3, 3, 2)))
    with pytest.raises(ShapeMismatch):
        forward(spec, w[:-1], np.zeros((1, 3, 3, 1)))


def test_init_is_seeded():
    spec = tiny_spec()
    a = init_weights(spec, np.random.default_rng(5))
    b = init_weights(spec, np.random.default_rng(5))
    for da, db in zip(a, b):
        for k in da:
            np.testing.assert_array_equal(da[k], db[k])
    k = a[0]["kernel"]
    assert np.abs(k).max() <= 2 * np.sqrt(2.0 / 9) and not a[0]["bias"].any()


# --- pixel shuffle ---------------------------------------------------------


def test_pixel_shuffle_layout():
    r, c = 2, 3
    x = np.arange(r * r * c, dtype=float).reshape(1, 1, 1, r * r * c)
    y = pixel_shuffle(x, r)
    for dy in range(r):
        for dx in range(r):
            for ch in range(c):
                assert y[0, dy, dx, ch] == (dy * r + dx) * c + ch


@settings(max_examples=25, deadline=None)
@given(r=st.integers(1, 4), c=st.integers(1, 3), h=st.integers(1, 4), w=st.integers(1, 4))
def test_pixel_shuffle_bijection(r, c, h, w):
    x = np.arange(2 * h * w * r * r * c, dtype=float).reshape(2, h, w, r * r * c)
    y = pixel_shuffle(x, r)
    assert sorted(y.ravel()) == sorted(x.ravel())
    np.testing.assert_array_equal(pixel_unshuffle(y, r), x)
    np.testing.assert_array_equal(pixel_shuffle(pixel_unshuffle(y, r), r), y)


# --- gradients -------------------------------------------------------------


@pytest.mark.parametrize("de", [False, True])
def test_full_model_gradients(de, rng):
    spec = tiny_spec(de=de)
    w = init_weights(spec, rng, np.float64)
    for d in w:
        if d:
            d["bias"] += rng.normal(0, 0.1, d["bias"].shape)
    assert directional_check(spec, w, lr_batch(rng), rng) == 6


@pytest.mark.parametrize("kind", ["tanh", "relu"])
def test_single_layer_gradients(kind, rng):
    layers = [conv(2, 3, 3), LayerSpec(kind), conv(3, 2, 1)]
    spec = ModelSpec(tuple(layers))
    w = init_weights(spec, rng, np.float64)
    directional_check(spec, w, rng.uniform(-1, 1, (2, 4, 5, 2)), rng)


def test_input_gradient_of_conv(rng):
    # the second conv receives a cotangent for its input; check it via the first conv's kernel
    spec = ModelSpec((conv(1, 2, 3), conv(2, 3, 5), conv(3, 1, 3)))
    w = init_weights(spec, rng, np.float64)
    directional_check(spec, w, rng.uniform(-1, 1, (1, 6, 7, 1)), rng)


def test_one_by_one_conv_mean_gradient(rng):
    spec = ModelSpec((conv(1, 1, 1),))
    w = init_weights(spec, rng, np.float64)
    x = rng.uniform(-1, 1, (3, 4, 5, 1))
    tape = Tape()
    y = forward(spec, w, x, tape)
    grads = backward(tape, np.full(y.shape, 1.0 / y.size))
    assert grads[0]["kernel"].item() == pytest.approx(x.mean(), rel=1e-12)
    assert grads[0]["bias"][0] == pytest.approx(1.0)


def test_identity_branch_is_transparent():
    # constant pre-DE blocks equal to the LR input sit exactly on the identity branch
    b = 0.3
    lr = np.full((1, 2, 2, 1), np.tanh(b))
    head = [conv(1, 4, 1), LayerSpec("pixel_shuffle", factor=2), LayerSpec("tanh")]
    w = [{"kernel": np.zeros((1, 1, 1, 4)), "bias": np.full(4, b)}, {}, {}]
    probe = np.random.default_rng(0).standard_normal((1, 4, 4, 1))
    out = []
    for spec, ws in ((ModelSpec(tuple(head)), w), (ModelSpec(tuple(head) + (LayerSpec("de_layer", factor=2),)), w + [{}])):
        tape = Tape()
        forward(spec, ws, lr, tape)
        out.append(backward(tape, probe)[0])
    for k in ("kernel", "bias"):
        np.testing.assert_array_equal(out[0][k], out[1][k])


def test_backward_needs_tape():
    with pytest.raises(NoTape):
        backward(None, np.zeros(1))
    with pytest.raises(NoTape):
        backward(Tape(), np.zeros(1))


def test_float32_gradients_close_to_float64(rng):
    spec = tiny_spec()
    w64 = init_weights(spec, rng, np.float64)
    w32 = [{k: a.astype(np.float32) for k, a in d.items()} for d in w64]
    x = lr_batch(rng)
    probe = rng.standard_normal((2, 6, 6, 1))
    grads = []
    for w in (w64, w32):
        tape = Tape()
        forward(spec, w, x, tape)
        grads.append(backward(tape, probe))
    for g64, g32 in zip(*grads):
        for k in g64:
            np.testing.assert_allclose(g32[k], g64[k], rtol=1e-4, atol=1e-5)


# --- losses ----------------------------------------------------------------


def fd_grad(f, x, h=1e-6):
    g = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_mse_examples(rng):
    t = rng.uniform(-1, 1, (2, 4, 4, 1))
    v, g = loss_mse(t, t)
    assert v == 0.0 and not g.any()
    v, g = loss_mse(t + 0.25, t)
    assert v == pytest.approx(0.0625)
    np.testing.assert_allclose(g, 0.5 / t.size)


def test_mse_gradient_fd(rng):
    p, t = rng.uniform(-1, 1, (2, 3, 4, 1)), rng.uniform(-1, 1, (2, 3, 4, 1))
    _, g = loss_mse(p, t)
    np.testing.assert_allclose(g, fd_grad(lambda q: loss_mse(q, t)[0], p), rtol=1e-7, atol=1e-10)


def test_dual_resolution_examples(rng):
    t = rng.uniform(-1, 1, (1, 8, 8, 1))
    assert loss_dual_resolution(t, t, 16)[0] == 0.0
    c = 0.1
    assert loss_dual_resolution(t + c, t, 16)[0] == pytest.approx(c * c + 16 * c * c, rel=1e-12)
    p = rng.uniform(-1, 1, t.shape)
    assert loss_dual_resolution(p, t, 0)[0] == loss_mse(p, t)[0]


def test_dual_resolution_gradient_fd(rng):
    p, t = rng.uniform(-1, 1, (1, 8, 8, 1)), rng.uniform(-1, 1, (1, 8, 8, 1))
    _, g = loss_dual_resolution(p, t, 16)
    np.testing.assert_allclose(g, fd_grad(lambda q: loss_dual_resolution(q, t, 16)[0], p), rtol=1e-7, atol=1e-10)


def test_dual_resolution_shape_error():
    with pytest.raises(ShapeMismatch):
        loss_dual_resolution(np.zeros((1, 6, 6, 1)), np.zeros((1, 6, 6, 1)), 16)


def test_de_regularized_examples(rng):
    lr = np.full((1, 2, 2, 1), 0.5)
    pre = np.zeros((1, 8, 8, 1))
    final = enforce(pre, lr, 4)
    v, _, _ = loss_de_regularized(final, final, pre, lr, 100, 4)
    assert v == pytest.approx(50.0)
    # conserving pre-DE output: the penalty vanishes
    pre = upsample_nearest(lr, 4)
    t = rng.uniform(-1, 1, pre.shape)
    v, g, g_pre = loss_de_regularized(pre, t, pre, lr, 100, 4)
    assert v == loss_mse(pre, t)[0]
    assert not g_pre.any()
    # lambda = 0 reduces to MSE
    pre = rng.uniform(-1, 1, pre.shape)
    final = enforce(pre, lr, 4)
    v, g, g_pre = loss_de_regularized(final, t, pre, lr, 0, 4)
    assert v == loss_mse(final, t)[0] and not g_pre.any()


def test_de_regularized_total_gradient_fd(rng):
    lr = rng.uniform(-0.8, 0.8, (1, 2, 2, 1))
    t = rng.uniform(-1, 1, (1, 4, 4, 1))
    x = rng.uniform(-0.9, 0.9, t.shape)

    def total(z):
        return loss_de_regularized(enforce(z, lr, 2), t, z, lr, 100, 2)[0]

    _, g_final, g_pre = loss_de_regularized(enforce(x, lr, 2), t, x, lr, 100, 2)
    dx, _ = enforce_vjp(x, lr, 2, g_final)
    np.testing.assert_allclose(dx + g_pre, fd_grad(total, x), rtol=1e-7, atol=1e-9)


# --- optimizer and training ------------------------------------------------


def test_adam_first_step():
    g = np.array([0.5, -2.0, 1e-3])
    w = [{"kernel": np.zeros(3)}]
    Adam(eps=1e-7).step(w, [{"kernel": g}], 0.01)
    np.testing.assert_allclose(w[0]["kernel"], -0.01 * g / (np.abs(g) + 1e-7), rtol=1e-12)


def tiny_cfg(**kw):
    base = dict(steps=3, batch=2, chip=3, factor=2, widths=(3, 2), kernels=(3, 3, 3), seed=4, val_every=2)
    base.update(kw)
    return TrainConfig(**base)


def tiny_images(rng, n=3):
    return [rng.uniform(-1, 1, (12, 12, 1)) for _ in range(n)]


def test_zero_learning_rate_keeps_weights(rng):
    cfg = tiny_cfg(steps=1, lr=0.0)
    spec = cfg.model_spec()
    w0 = init_weights(spec, np.random.default_rng(1))
    res = train(cfg, tiny_images(rng), spec=spec, weights=[{k: a.copy() for k, a in d.items()} for d in w0])
    for a, b in zip(w0, res.weights):
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


@pytest.mark.parametrize("loss", ["mse", "dual_resolution", "de_regularized"])
def test_training_is_deterministic(loss, rng):
    images = tiny_images(rng)
    runs = [train(tiny_cfg(loss=loss), images, images[:1]) for _ in range(2)]
    for a, b in zip(runs[0].weights, runs[1].weights):
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
    assert [r["loss"] for r in runs[0].log] == [r["loss"] for r in runs[1].log]


def test_training_log(rng):
    images = tiny_images(rng)
    cfg = tiny_cfg(loss="dual_resolution")
    res = train(cfg, images, images[:1])
    assert [r["step"] for r in res.log] == [1, 2, 3]
    assert res.log[0]["val_mse"] is None and res.log[1]["val_mse"] is not None
    assert res.final_val_mse == res.log[2]["val_mse"]
    text = log_csv(res, cfg)
    lines = text.splitlines()
    assert lines[0] == "# loss=dual_resolution(16) seed=4 de=on"
    assert lines[1] == "step,loss,val_mse,val_psnr"
    assert lines[2].endswith(",,") and len(lines) == 5


def test_training_errors(rng):
    with pytest.raises(EmptyDataset):
        train(tiny_cfg(), [])
    with pytest.raises(EmptyDataset):
        train(tiny_cfg(), [np.zeros((4, 4, 1))])
    with pytest.raises(NoDELayer):
        tiny_cfg(loss="de_regularized", de=False)
    with pytest.raises(DivergedLoss):
        train(tiny_cfg(), [np.full((12, 12, 1), np.nan)])


# --- augmentation ----------------------------------------------------------


def test_dihedral_group(rng):
    x = rng.standard_normal((4, 4, 2))
    np.testing.assert_array_equal(dihedral(x, 0), x)
    seen = set()
    for k in range(8):
        np.testing.assert_array_equal(dihedral_inverse(dihedral(x, k), k), x)
        seen.add(dihedral(x, k).tobytes())
    assert len(seen) == 8


def test_dihedral_commutes_with_downsample(rng):
    hr = rng.standard_normal((8, 8, 1))
    for k in range(8):
        np.testing.assert_allclose(
            downsample_avg(np.ascontiguousarray(dihedral(hr, k)), 4),
            dihedral(downsample_avg(hr, 4), k),
            rtol=0,
            atol=1e-15,
        )


def test_augment_pairs(rng):
    hr = rng.standard_normal((8, 8, 1))
    lr = downsample_avg(hr, 4)
    counts = np.zeros(8)
    for _ in range(400):
        a_lr, a_hr = augment((lr, hr), rng)
        np.testing.assert_allclose(downsample_avg(a_hr, 4), a_lr, rtol=0, atol=1e-15)
        k = next(k for k in range(8) if np.array_equal(dihedral(hr, k), a_hr))
        counts[k] += 1
    assert counts.min() > 20
    with pytest.raises(NotSquare):
        augment((np.zeros((2, 3, 1)), np.zeros((8, 12, 1))), rng)


# --- config and checkpoints ------------------------------------------------


def test_parse_config_round_trip():
    cfg = TrainConfig(loss="de_regularized", steps=50, widths=(8, 4), lr=3e-4)
    assert parse_config(format_config(cfg)) == cfg


def test_parse_config_aliases_and_comments():
    cfg = parse_config("# toy\nloss = dual_resolution\nlambda = 4  # weaker\nlearning_rate=0.01\nde = off\n")
    assert cfg.loss == "dual_resolution" and cfg.lam == 4 and cfg.lr == 0.01 and not cfg.de
    assert parse_config("loss = de_regularized\n").lam == 100


@pytest.mark.parametrize(
    "text, line",
    [
        ("steps = 5\nbogus = 1\n", 2),
        ("steps = 5\nsteps = 6\n", 2),
        ("\n\nsteps five\n", 3),
        ("batch = x\n", 1),
        ("de = maybe\n", 1),
    ],
)
def test_parse_config_errors_carry_line(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}:")


def test_parse_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        parse_config("lr = -1\n")
    with pytest.raises(ConfigError):
        parse_config("loss = l1\n")
    with pytest.raises(ConfigError):
        parse_config("loss = de_regularized\nde = off\n")


def test_checkpoint_round_trip(tmp_path, rng):
    spec = srcnn_spec(channels=3, factor=2, widths=(4, 3), kernels=(3, 1, 3))
    w = init_weights(spec, rng)
    path = tmp_path / "m.csrw"
    save_checkpoint(path, spec, w)
    spec2, w2 = load_checkpoint(path)
    assert spec2 == spec
    for a, b in zip(w, w2):
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
    raw = path.read_bytes()
    assert raw[:4] == b"CSRW"
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
