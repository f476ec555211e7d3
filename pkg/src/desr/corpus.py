"""Deterministic synthetic grayscale corpus: fractal noise with sharp shapes and stripes."""

from pathlib import Path

import numpy as np

from .io import write_png

CORPUS_SEED = 4242
CORPUS_SIZE = 24
IMAGE_SIZE = 192


def fractal_noise(rng, size: int, beta: float) -> np.ndarray:
    """Gaussian field with a ``1 / f**beta`` power spectrum, zero mean, unit std."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    f[0, 0] = 1.0
    amp = f ** (-beta / 2.0)
    amp[0, 0] = 0.0
    spec = amp * (rng.standard_normal(amp.shape) + 1j * rng.standard_normal(amp.shape))
    field = np.fft.irfft2(spec, s=(size, size))
    return (field - field.mean()) / field.std()


def _shapes(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = np.zeros((size, size))
    for _ in range(int(rng.integers(2, 7))):
        level = rng.uniform(-1.5, 1.5)
        if rng.random() < 0.5:
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(size / 16, size / 4)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            y0, x0 = rng.uniform(0, size * 0.8, 2)
            h, w = rng.uniform(size / 10, size / 2.5, 2)
            mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        out[mask] = level
    return out


def _stripes(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(5.0, 24.0)
    return np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)


def synthetic_image(rng, size: int = IMAGE_SIZE) -> np.ndarray:
    """One 8-bit grayscale image as a float64 ``(size, size, 1)`` array on 0-255."""
    img = fractal_noise(rng, size, rng.uniform(1.6, 2.8))
    img += rng.uniform(0.3, 1.0) * _shapes(rng, size)
    img += rng.uniform(0.0, 0.5) * _stripes(rng, size)
    img += rng.uniform(0.1, 0.4) * fractal_noise(rng, size, rng.uniform(0.5, 1.2))
    lo, hi = np.percentile(img, [1.0, 99.0])
    img = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    return np.rint(img * 255.0)[:, :, None]


def synthetic_corpus(n: int = CORPUS_SIZE, size: int = IMAGE_SIZE, seed: int = CORPUS_SEED):
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size) for _ in range(n)]


def write_corpus(directory, n: int = CORPUS_SIZE, size: int = IMAGE_SIZE, seed: int = CORPUS_SEED):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, img in enumerate(synthetic_corpus(n, size, seed)):
        p = d / f"synth_{k:03d}.png"
        write_png(p, img)
        paths.append(p)
    return paths
