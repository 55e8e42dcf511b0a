"""PSNR / SSIM on the BT.601 luma channel with a border shave."""

from __future__ import annotations

import math

import numpy as np

from .data import ImageBuffer
from .errors import ContractError

#: returned by :func:`psnr` for identical inputs
IDENTICAL = math.inf

_Y_WEIGHTS = np.array([65.481, 128.553, 24.966]) / 255.0


def to_luma(img) -> np.ndarray:
    """Float Y in [16, 235] from an ImageBuffer / (h, w, 3) bytes; 2-d arrays pass through as luma."""
    arr = img.data if isinstance(img, ImageBuffer) else np.asarray(img)
    if arr.ndim == 2:
        return arr.astype(np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractError(f"expected (h, w, 3) or (h, w), got {arr.shape}")
    return arr.astype(np.float64) @ _Y_WEIGHTS + 16.0


def _prepare(a, b, border: int):
    ya, yb = to_luma(a), to_luma(b)
    if ya.shape != yb.shape:
        raise ContractError(f"shape mismatch: {ya.shape} vs {yb.shape}")
    if border:
        ya = ya[border:-border, border:-border]
        yb = yb[border:-border, border:-border]
    if ya.size == 0:
        raise ContractError(f"border {border} removes the whole image")
    return ya, yb


def psnr(a, b, border: int = 0) -> float:
    ya, yb = _prepare(a, b, border)
    mse = np.mean((ya - yb) ** 2)
    if mse == 0:
        return IDENTICAL
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    v = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(v, k, axis=1) @ g


def ssim(a, b, border: int = 0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 255.0) -> float:
    ya, yb = _prepare(a, b, border)
    if ya.shape[0] < window or ya.shape[1] < window:
        raise ContractError(f"image {ya.shape} smaller than the {window}x{window} SSIM window")
    if np.array_equal(ya, yb):
        return 1.0
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    g = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(ya, g), _filter_valid(yb, g)
    saa = _filter_valid(ya * ya, g) - mu_a ** 2
    sbb = _filter_valid(yb * yb, g) - mu_b ** 2
    sab = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))
