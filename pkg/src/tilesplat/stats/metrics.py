"""Image quality metrics: PSNR and Gaussian-window SSIM (with its gradient)."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionMismatch, TooSmall

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 100.0


def _as_array(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img))


def _check_pair(a, b):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images with peak value 1.0."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable valid-region correlation over the first two axes of (H, W, C)."""
    k = len(taps)
    rows = sliding_window_view(img, k, axis=0) @ taps
    return sliding_window_view(rows, k, axis=1) @ taps


def _filter_valid_adjoint(grad: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # adjoint of valid correlation: full convolution (symmetric taps)
    k = len(taps) - 1
    padded = np.pad(grad, ((k, k), (k, k), (0, 0)))
    return _filter_valid(padded, taps[::-1])


def _ssim_terms(x, y, taps):
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    var_x = _filter_valid(x * x, taps) - mu_x * mu_x
    var_y = _filter_valid(y * y, taps) - mu_y * mu_y
    cov = _filter_valid(x * y, taps) - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    return mu_x, mu_y, a1, a2, b1, b2


def _prepare(a, b):
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise TooSmall(f"SSIM needs both sides >= {SSIM_WINDOW}, got {a.shape[:2]}")
    return a.astype(np.float64), b.astype(np.float64)


def ssim(a, b) -> float:
    """Mean SSIM over the valid region, averaged across channels."""
    x, y = _prepare(a, b)
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y, gaussian_window())
    return float(np.mean((a1 * a2) / (b1 * b2)))


def ssim_and_grad(a, b) -> tuple[float, np.ndarray]:
    """SSIM(a, b) and its gradient with respect to ``a``."""
    x, y = _prepare(a, b)
    taps = gaussian_window()
    mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(x, y, taps)
    den = b1 * b2
    s = (a1 * a2) / den
    scale = 1.0 / s.size

    d_var = -s / b2 * scale
    d_cov = 2 * a1 / den * scale
    d_mu = (2 * mu_y * a2 / den - 2 * mu_x * s / b1) * scale
    d_mu = d_mu - 2 * mu_x * d_var - mu_y * d_cov

    grad = (
        _filter_valid_adjoint(d_mu, taps)
        + 2 * x * _filter_valid_adjoint(d_var, taps)
        + y * _filter_valid_adjoint(d_cov, taps)
    )
    grad = grad.reshape(_as_array(a).shape)
    return float(np.mean(s)), grad
