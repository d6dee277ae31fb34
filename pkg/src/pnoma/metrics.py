"""PSNR, SSIM and MS-SSIM for images laid out as ``(C, H, W)``."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numcore import ContractError

PSNR_CAP_DB = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_MAX_FILTER = 11
GLOBAL_WINDOW_MAX_SIZE = 32
SLIDING_WINDOW = 8


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    return x, y


def mse(x, x_hat) -> float:
    x, x_hat = _pair(x, x_hat)
    return float(np.mean((x - x_hat) ** 2))


def psnr(x, x_hat, A: float = 1.0) -> float:
    """``10 log10(A^2 / MSE)``; identical inputs give ``inf``."""
    if A <= 0:
        raise ContractError("peak value A must be positive")
    err = mse(x, x_hat)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(A * A / err)


def psnr_for_csv(value: float) -> float:
    return PSNR_CAP_DB if math.isinf(value) else value


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: int | None, c1: float, c2: float) -> float:
    h, w = a.shape
    if window is None or window >= min(h, w):
        mu_a, mu_b = a.mean(), b.mean()
        var_a = ((a - mu_a) ** 2).mean()
        var_b = ((b - mu_b) ** 2).mean()
        cov = ((a - mu_a) * (b - mu_b)).mean()
    else:
        wa = sliding_window_view(a, (window, window))
        wb = sliding_window_view(b, (window, window))
        mu_a = wa.mean(axis=(-2, -1))
        mu_b = wb.mean(axis=(-2, -1))
        var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
        var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
        cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def default_window(h: int, w: int) -> int | None:
    return None if min(h, w) <= GLOBAL_WINDOW_MAX_SIZE else SLIDING_WINDOW


def ssim(x, x_hat, A: float = 1.0, window: int | None = -1) -> float:
    """Single-scale SSIM averaged over colour channels.

    ``window=-1`` picks the default: whole-image statistics for images up to
    32 pixels on a side, otherwise an 8x8 uniform sliding window. ``None``
    forces whole-image statistics.
    """
    x, x_hat = _pair(x, x_hat)
    if window == -1:
        window = default_window(*x.shape[-2:])
    c1 = (0.01 * A) ** 2
    c2 = (0.03 * A) ** 2
    return float(np.mean([_ssim_channel(a, b, window, c1, c2) for a, b in zip(x, x_hat)]))


def max_ms_ssim_scales(min_dim: int, filter_size: int) -> int:
    """Largest scale count whose coarsest image is still at least ``filter_size`` wide."""
    if filter_size < 1 or min_dim < filter_size:
        return 0
    return int(math.floor(math.log2(min_dim / filter_size))) + 1


def _downsample(img: np.ndarray) -> np.ndarray:
    c, h, w = img.shape
    h2, w2 = h // 2, w // 2
    return img[:, :2 * h2, :2 * w2].reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))


def ms_ssim(x, x_hat, weights=MS_SSIM_WEIGHTS, A: float = 1.0,
            filter_size: int | None = None) -> float:
    """Weighted geometric mean of SSIM over a 2x average-pooling pyramid.

    With ``filter_size=None`` the window is the largest size <= 11 for which
    every requested scale still fits. Negative per-scale SSIM is clipped to 0
    before exponentiation.
    """
    x, x_hat = _pair(x, x_hat)
    weights = np.asarray(weights, dtype=np.float64)
    scales = len(weights)
    min_dim = min(x.shape[-2:])
    if filter_size is None:
        filter_size = min(MS_SSIM_MAX_FILTER, min_dim // 2 ** (scales - 1))
    feasible = max_ms_ssim_scales(min_dim, max(filter_size, 1))
    if filter_size < 1 or scales > feasible:
        best = max_ms_ssim_scales(min_dim, max(filter_size, 1))
        raise ContractError(f"image of side {min_dim} supports at most {best} scales "
                            f"with filter size {max(filter_size, 1)}, {scales} requested")
    total = 0.0
    for j, w in enumerate(weights):
        if j:
            x, x_hat = _downsample(x), _downsample(x_hat)
        s = max(ssim(x, x_hat, A=A, window=filter_size), 0.0)
        if s == 0.0:
            return 0.0
        total += w * math.log(s)
    return float(math.exp(total / weights.sum()))


def ms_ssim_auto(x, x_hat, A: float = 1.0) -> float:
    """MS-SSIM with as many of the default scales as the image supports."""
    x = np.asarray(x)
    min_dim = min(x.shape[-2:])
    scales = max(1, min(len(MS_SSIM_WEIGHTS), max_ms_ssim_scales(min_dim, 1)))
    return ms_ssim(x, x_hat, weights=MS_SSIM_WEIGHTS[:scales], A=A)
