"""Image quality metrics: PSNR, SSIM, NCC and the SSIM structure index (SI).

Inputs are float images in [0, 1] (``H x W`` or ``H x W x C``); signed
images should go through :func:`to_unit` first.  Windowed metrics use an
11x11 Gaussian window (sigma 1.5) over valid positions only and average the
per-channel scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
INF_SENTINEL = "+inf"


def to_unit(image, normalization="unit"):
    img = np.asarray(image, dtype=np.float64)
    return (img + 1.0) * 0.5 if normalization == "signed" else img


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise DimensionError("empty images")
    return a, b


def psnr(a, b, peak=1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images match."""
    a, b = _pair(a, b)
    if not peak > 0:
        raise DomainError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=WINDOW, sigma=SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _channels(a, b):
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise DimensionError(f"expected H x W or H x W x C images, got {a.shape}")
    if a.shape[0] < WINDOW or a.shape[1] < WINDOW:
        raise DomainError(f"images must be at least {WINDOW}x{WINDOW}, got {a.shape[:2]}")
    return a, b


def _local_stats(a, b):
    """Gaussian-weighted means, variances and covariance at every valid window."""
    k = gaussian_window()

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, k.shape), k)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    return mu_a, mu_b, np.maximum(var_a, 0.0), np.maximum(var_b, 0.0), cov


def ssim_map(a, b, data_range=1.0):
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b, va, vb, cov = _local_stats(a, b)
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))


def structure_map(a, b, data_range=1.0):
    c3 = (K2 * data_range) ** 2 / 2.0
    _, _, va, vb, cov = _local_stats(a, b)
    return (cov + c3) / (np.sqrt(va * vb) + c3)


def ssim(a, b, data_range=1.0) -> float:
    a, b = _channels(a, b)
    return float(np.mean([ssim_map(a[..., c], b[..., c], data_range).mean()
                          for c in range(a.shape[2])]))


def si(a, b, data_range=1.0) -> float:
    """Structure index: mean of SSIM's structure term over the SSIM windows."""
    a, b = _channels(a, b)
    return float(np.mean([structure_map(a[..., c], b[..., c], data_range).mean()
                          for c in range(a.shape[2])]))


def ncc(a, b) -> float:
    """Pearson correlation of the flattened, mean-removed images."""
    a, b = _pair(a, b)
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    saa, sbb = np.dot(da, da), np.dot(db, db)
    if saa == 0 or sbb == 0:
        raise DomainError("ncc is undefined for a constant image")
    return float(np.clip(np.dot(da, db) / np.sqrt(saa * sbb), -1.0, 1.0))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    ncc: float
    si: float

    def as_record(self, **keys):
        rec = dict(keys)
        rec["psnr"] = INF_SENTINEL if math.isinf(self.psnr) else round(self.psnr, 6)
        rec.update(ssim=round(self.ssim, 6), ncc=round(self.ncc, 6), si=round(self.si, 6))
        return rec


def evaluate(reference, test, normalization="unit") -> MetricReport:
    ref, tst = to_unit(reference, normalization), to_unit(test, normalization)
    return MetricReport(psnr(ref, tst), ssim(ref, tst), ncc(ref, tst), si(ref, tst))
