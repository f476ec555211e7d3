"""Command-line front end.

Exit codes: 0 success, 2 I/O or usage error, 3 shape or value-range error,
4 missing or unreadable weights, 5 bad config or empty dataset, 6 training
diverged. Every subcommand reads and validates all of its inputs before it
writes anything.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import errors
from .corpus import CORPUS_SEED
from .de import correction_surface, enforce, evenly_spaced_block, surface_csv
from .grid import Grid, assemble_centers, denormalize, normalize, tile
from .io import EXTENSIONS, kind_of, read_grid, write_grid
from .metrics import evaluate
from .resample import downsample_avg, upsample_bilinear, upsample_nearest

EXIT_IO, EXIT_SHAPE, EXIT_WEIGHTS, EXIT_CONFIG, EXIT_DIVERGED = 2, 3, 4, 5, 6
PNG_RANGE = (0.0, 255.0)


class CLIError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# --- helpers ---------------------------------------------------------------


def _check_output(path) -> Path:
    p = Path(path)
    try:
        kind_of(p)
    except errors.FormatError as exc:
        raise CLIError(EXIT_IO, str(exc)) from None
    if not p.parent.is_dir():
        raise CLIError(EXIT_IO, f"{p.parent}: output directory does not exist")
    return p


def _check_text_output(path):
    if path is None or path == "-":
        return None
    p = Path(path)
    if not p.parent.is_dir():
        raise CLIError(EXIT_IO, f"{p.parent}: output directory does not exist")
    return p


def _read(path) -> np.ndarray:
    return read_grid(path)


def _parse_range(text):
    if text is None:
        return None
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise CLIError(EXIT_IO, f"--range expects LO,HI, got {text!r}") from None
    return lo, hi


def _value_range(paths, arrays, given):
    """PNG files live on 0-255; raw grids use ``--range`` or their joint min/max."""
    if given is not None:
        return given
    if all(kind_of(p) == "png" for p in paths):
        return PNG_RANGE
    lo = min(float(a.min()) for a in arrays)
    hi = max(float(a.max()) for a in arrays)
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def _to_255(y):
    # metrics are reported on the 0-255 scale whatever the source units
    return (np.asarray(y, dtype=np.float64) + 1.0) * 127.5


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v) + 0.0)


def _emit(text: str, path) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="\n") as f:
            f.write(text)


def _data_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise CLIError(EXIT_IO, f"{d}: not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in EXTENSIONS)


def _load_model(path):
    from .model import load_checkpoint

    p = Path(path) if path is not None else None
    if p is None or not p.is_file():
        raise CLIError(EXIT_WEIGHTS, f"weights file not found: {path}")
    try:
        return load_checkpoint(p)
    except (errors.FormatError, OSError) as exc:
        raise CLIError(EXIT_WEIGHTS, str(exc)) from None


def _denormalize(y, lo, hi):
    return denormalize(Grid(np.clip(y, -1.0, 1.0), normalized=True), lo, hi)


def _residual(hr, lr, n) -> float:
    return float(np.abs(downsample_avg(np.asarray(hr, dtype=np.float64), n) - lr).max())


# --- subcommands -----------------------------------------------------------


def cmd_degrade(args) -> int:
    out = _check_output(args.output)
    x = _read(args.input)
    y = downsample_avg(x, args.factor)
    write_grid(out, y)
    return 0


def cmd_enforce(args) -> int:
    out = _check_output(args.output)
    hr, lr = _read(args.hr), _read(args.lr)
    if hr.shape != (lr.shape[0] * args.factor, lr.shape[1] * args.factor, lr.shape[2]):
        raise errors.ShapeMismatch(f"hr {hr.shape} is not {args.factor}x lr {lr.shape}")
    lo, hi = _value_range([args.hr, args.lr], [hr, lr], _parse_range(args.range))
    h, l = normalize(hr, lo, hi), normalize(lr, lo, hi)
    y = enforce(h.data, l.data, args.factor)
    magnitude = float(np.mean(np.abs(y - h.data)))
    # residual is measured before the output is quantized by the file format
    print(f"correction_magnitude={_fmt(magnitude)}")
    print(f"max_residual={_fmt(_residual(y, l.data, args.factor))}")
    write_grid(out, _denormalize(y, lo, hi))
    return 0


def _upsample(method, lr, n, model=None):
    if method == "nearest":
        return upsample_nearest(lr, n)
    if method == "bilinear":
        return upsample_bilinear(lr, n)
    from .model import predict

    spec, weights = model
    return np.asarray(predict(spec, weights, lr[None])[0], dtype=np.float64)


def cmd_upscale(args) -> int:
    out = _check_output(args.output)
    model = None
    if args.method == "model":
        model = _load_model(args.weights)
        spec = model[0]
        if spec.factor != args.factor:
            raise errors.ShapeMismatch(f"model upsamples by {spec.factor}, --factor is {args.factor}")
    lr_raw = _read(args.input)
    if model is not None and lr_raw.shape[2] != model[0].channels:
        raise errors.ChannelMismatch(f"model takes {model[0].channels} channels, input has {lr_raw.shape[2]}")
    lo, hi = _value_range([args.input], [lr_raw], _parse_range(args.range))
    lr = normalize(lr_raw, lo, hi).data
    y = _upsample(args.method, lr, args.factor, model)
    if args.de == "on":
        y = enforce(y, lr, args.factor)
    print(f"max_residual={_fmt(_residual(y, lr, args.factor))}")
    write_grid(out, _denormalize(y, lo, hi))
    return 0


def _load_dataset(directory, given_range):
    files = _data_files(directory)
    if not files:
        raise errors.EmptyDataset(f"{directory}: no .png or .csrg files")
    raw = [_read(p) for p in files]
    lo, hi = _value_range(files, raw, given_range)
    return files, [normalize(a, lo, hi).data for a in raw]


def cmd_train(args) -> int:
    from .model import log_csv, parse_config, save_checkpoint, train
    from .model.train import with_overrides

    weights_out = Path(args.weights_out)
    if weights_out.suffix.lower() != ".csrw" or not weights_out.parent.is_dir():
        raise CLIError(EXIT_IO, f"{weights_out}: need a .csrw path in an existing directory")
    log_out = _check_text_output(args.log or weights_out.with_suffix(".csv"))
    fig_out = _check_text_output(args.figure)
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise CLIError(EXIT_IO, f"{args.config}: {exc.strerror}") from None
    cfg = parse_config(text)
    if args.seed is not None:
        cfg = with_overrides(cfg, seed=args.seed)
    rng = _parse_range(args.range)
    _, images = _load_dataset(args.data, rng)
    val = _load_dataset(args.val, rng)[1] if args.val else images
    result = train(cfg, images, val)
    save_checkpoint(weights_out, result.spec, result.weights)
    _emit(log_csv(result, cfg), log_out)
    if fig_out is not None:
        from .plotting import training_figure

        training_figure(result, fig_out, cfg.loss_name)
    return 0


def _chip_predictions(source, lr_chips, n, model):
    if source in ("nearest", "bilinear"):
        return [_upsample(source, c, n) for c in lr_chips]
    from .model import predict

    spec, weights = model
    out = predict(spec, weights, np.stack(lr_chips))
    return [np.asarray(o, dtype=np.float64) for o in out]


def _eval_one(truth_path, args, lo_hi, model, pred_dir):
    n = args.factor
    truth = normalize(_read(truth_path), *lo_hi).data
    lr = downsample_avg(truth, n)
    tiles = tile(lr, args.chip, args.stride)
    r0, r1, c0, c1 = tiles.scored_box
    ref = truth[r0 * n : r1 * n, c0 * n : c1 * n]
    lr_box = lr[r0:r1, c0:c1]
    use_de = args.de == "on" or (model is not None and model[0].has_de)
    if pred_dir is not None:
        pred_path = pred_dir / truth_path.name
        if not pred_path.is_file():
            raise CLIError(EXIT_IO, f"{pred_path}: no prediction for {truth_path.name}")
        pred = _read(pred_path)
        if pred.shape != truth.shape:
            raise errors.ShapeMismatch(f"{pred_path.name}: prediction {pred.shape} vs truth {truth.shape}")
        pred = normalize(pred, *lo_hi).data[r0 * n : r1 * n, c0 * n : c1 * n]
        if args.de == "on":
            pred = enforce(pred, lr_box, n)
    else:
        chips = [c for c in tiles.crops(lr)]
        outs = _chip_predictions(args.source, chips, n, model)
        if args.de == "on":
            outs = [enforce(o, c, n) for o, c in zip(outs, chips)]
        pred = assemble_centers(tiles, outs, n).data
    rep = evaluate(_to_255(pred), _to_255(ref))
    residual = _residual(pred, lr_box, n) if use_de else None
    return truth_path.name, rep, residual


def cmd_eval(args) -> int:
    out = _check_text_output(args.out)
    truth_files = _data_files(args.truth)
    if not truth_files:
        raise errors.EmptyDataset(f"{args.truth}: no .png or .csrg files")
    model, pred_dir = None, None
    src = args.source
    if src in ("nearest", "bilinear"):
        pass
    elif src.lower().endswith(".csrw"):
        model = _load_model(src)
        if model[0].factor != args.factor:
            raise errors.ShapeMismatch(f"model upsamples by {model[0].factor}, --factor is {args.factor}")
        args.source = "model"
    elif Path(src).is_dir():
        pred_dir = Path(src)
    else:
        raise CLIError(EXIT_IO, f"{src}: not a prediction directory, .csrw file, nearest or bilinear")
    given = _parse_range(args.range)
    lo_hi = given if given is not None else (
        PNG_RANGE if all(kind_of(p) == "png" for p in truth_files) else None
    )
    if lo_hi is None:
        raw = [_read(p) for p in truth_files]
        lo_hi = _value_range(truth_files, raw, None)
    work = lambda p: _eval_one(p, args, lo_hi, model, pred_dir)  # noqa: E731
    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            rows = list(pool.map(work, truth_files))
    else:
        rows = [work(p) for p in truth_files]
    rows.sort(key=lambda r: r[0])
    with_residual = any(r[2] is not None for r in rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["image", "psnr_db", "ssim", "mse"] + (["residual"] if with_residual else [])
    w.writerow(header)
    for name, rep, res in rows:
        w.writerow([name, _fmt(rep.psnr_db), _fmt(rep.ssim), _fmt(rep.mse)] + ([_fmt(res)] if with_residual else []))
    means = [
        float(np.mean([r[1].psnr_db for r in rows])),
        float(np.mean([r[1].ssim for r in rows])),
        float(np.mean([r[1].mse for r in rows])),
    ]
    tail = [_fmt(max(r[2] for r in rows))] if with_residual else []
    w.writerow(["mean"] + [_fmt(v) for v in means] + tail)
    _emit(buf.getvalue(), out)
    return 0


def cmd_plot_correction(args) -> int:
    if args.n < 2:
        raise CLIError(EXIT_SHAPE, f"--n must be at least 2, got {args.n}")
    out = _check_text_output(args.out)
    fig = _check_text_output(args.figure)
    x = evenly_spaced_block(args.n)
    rows = correction_surface(x, np.linspace(-1.0, 1.0, args.points))
    _emit(surface_csv(rows), out)
    if fig is not None:
        from .plotting import correction_figure

        correction_figure(rows, fig)
    return 0


def cmd_corpus(args) -> int:
    from .corpus import write_corpus

    d = Path(args.directory)
    if d.exists() and not d.is_dir():
        raise CLIError(EXIT_IO, f"{d}: exists and is not a directory")
    for p in write_corpus(d, args.n, args.size, args.corpus_seed):
        print(p)
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="desr", description="Super-resolution with exact 2D-average consistency.")
    p.add_argument("--seed", type=int, default=None, help="override the training seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default 1, deterministic)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("degrade", help="2D-average downsample a .png or .csrg file")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--factor", type=int, default=4)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("enforce", help="make an HR field average exactly to an LR field")
    s.add_argument("hr")
    s.add_argument("lr")
    s.add_argument("output")
    s.add_argument("--factor", type=int, default=4)
    s.add_argument("--range", help="LO,HI value range of raw grids (default: their min,max)")
    s.set_defaults(func=cmd_enforce)

    s = sub.add_parser("upscale", help="upsample an LR file, optionally enforcing consistency")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--factor", type=int, default=4)
    s.add_argument("--method", choices=("nearest", "bilinear", "model"), default="bilinear")
    s.add_argument("--weights")
    s.add_argument("--de", choices=("on", "off"), default="on")
    s.add_argument("--range")
    s.set_defaults(func=cmd_upscale)

    s = sub.add_parser("train", help="train the SR network from a key=value config")
    s.add_argument("config")
    s.add_argument("data", help="directory of training .png/.csrg files")
    s.add_argument("weights_out", help="output .csrw checkpoint")
    s.add_argument("--val", help="directory of validation files (default: the training files)")
    s.add_argument("--log", help="training log CSV (default: next to the checkpoint)")
    s.add_argument("--figure", help="also render the training curve to this PNG")
    s.add_argument("--range")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score predictions or an upsampler against truth images")
    s.add_argument("source", help="prediction directory, .csrw weights, nearest or bilinear")
    s.add_argument("truth", help="directory of truth files")
    s.add_argument("--factor", type=int, default=4)
    s.add_argument("--chip", type=int, default=48)
    s.add_argument("--stride", type=int, default=24)
    s.add_argument("--de", choices=("on", "off"), default="off", help="enforce consistency on the predictions")
    s.add_argument("--out", help="CSV path (default: standard output)")
    s.add_argument("--range")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot-correction", help="tabulate the correction surface of one block")
    s.add_argument("--n", type=int, default=16, help="samples in the block")
    s.add_argument("--points", type=int, default=201, help="P values on [-1, 1]")
    s.add_argument("--out", help="CSV path (default: standard output)")
    s.add_argument("--figure", help="also render the surface to this PNG")
    s.set_defaults(func=cmd_plot_correction)

    s = sub.add_parser("corpus", help="write the synthetic grayscale corpus as PNG files")
    s.add_argument("directory")
    s.add_argument("--n", type=int, default=24)
    s.add_argument("--size", type=int, default=192)
    s.add_argument("--corpus-seed", type=int, default=CORPUS_SEED)
    s.set_defaults(func=cmd_corpus)
    return p


def _limit_threads(n: int) -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


_EXIT_FOR = (
    (errors.DivergedLoss, EXIT_DIVERGED),
    (errors.ConfigError, EXIT_CONFIG),
    (errors.EmptyDataset, EXIT_CONFIG),
    (errors.NoDELayer, EXIT_CONFIG),
    (errors.FormatError, EXIT_IO),
    (errors.DESRError, EXIT_SHAPE),
    (OSError, EXIT_IO),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("desr: --threads must be >= 1", file=sys.stderr)
        return EXIT_IO
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"desr {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:
        for kind, code in _EXIT_FOR:
            if isinstance(exc, kind):
                msg = exc.strerror if isinstance(exc, OSError) and exc.strerror else str(exc)
                where = f"{exc.filename}: " if isinstance(exc, OSError) and exc.filename else ""
                print(f"desr {args.command}: {where}{msg}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
