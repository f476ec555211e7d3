"""Optional PNG figures for the CLI report commands.

matplotlib is imported lazily with the non-interactive Agg backend, so the
rest of the package never pays for it.
"""

from __future__ import annotations

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def correction_figure(rows, path) -> None:
    """Correction ``f_i - x_i`` against ``P``, one line per sample ``x_i``."""
    plt = _pyplot()
    P = np.array([r[0] for r in rows])
    idx = np.array([r[1] for r in rows])
    x = np.array([r[2] for r in rows])
    c = np.array([r[3] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4.5))
    cmap = plt.get_cmap("coolwarm")
    for i in np.unique(idx):
        sel = idx == i
        ax.plot(P[sel], c[sel], color=cmap((x[sel][0] + 1) / 2), lw=1.2)
    ax.axhline(0.0, color="0.6", lw=0.6)
    ax.set_xlabel("P")
    ax.set_ylabel("correction $f_i - x_i$")
    sm = plt.cm.ScalarMappable(cmap=cmap, norm=plt.Normalize(-1, 1))
    fig.colorbar(sm, ax=ax, label="$x_i$")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_figure(result, path, label=None) -> None:
    """Training loss and validation MSE against step."""
    plt = _pyplot()
    steps = [r["step"] for r in result.log]
    loss = [r["loss"] for r in result.log]
    val = [(r["step"], r["val_mse"]) for r in result.log if r["val_mse"] is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, loss, lw=0.7, alpha=0.6, label="training loss")
    if val:
        vs, vm = zip(*val)
        ax.plot(vs, vm, "o-", ms=3, label="validation MSE")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    if label:
        ax.set_title(label)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
