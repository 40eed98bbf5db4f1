"""Orthonormal 2D DCT, low-frequency coefficient selection, and the two
reconstruction metrics: 8-bit-scale MSE and complex-wavelet structural
similarity (CW-SSIM) over a complex Gabor filter bank.

The DCT is computed by multiplication with precomputed orthonormal basis
matrices rather than a fast transform: images here are tiny (50x60) and
the matrix form keeps the transform and its exact inverse obvious.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import fftconvolve

from .tensor import DTYPE, Tensor

# DCT coefficient grids are plain [H,W] float32 arrays with (0,0) the DC term.
DctCoeffs = np.ndarray


@lru_cache(maxsize=16)
def _dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis matrix, rows indexed by frequency."""
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * m + 1) * k / (2 * n))
    d[0] *= math.sqrt(1.0 / n)
    d[1:] *= math.sqrt(2.0 / n)
    return d


def _check_image(image, name="image") -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-d array, got shape {image.shape}")
    return image


def dct2(image: Tensor) -> DctCoeffs:
    """Separable orthonormal 2D DCT-II (rows, then columns)."""
    image = _check_image(image)
    h, w = image.shape
    c = _dct_matrix(h) @ image.astype(np.float64) @ _dct_matrix(w).T
    return c.astype(DTYPE)


def idct2(coeffs: DctCoeffs) -> Tensor:
    """Exact inverse of :func:`dct2` (orthonormal DCT-III)."""
    coeffs = _check_image(coeffs, "coeffs")
    h, w = coeffs.shape
    x = _dct_matrix(h).T @ coeffs.astype(np.float64) @ _dct_matrix(w)
    return x.astype(DTYPE)


def select_low_freq(coeffs: DctCoeffs, block: tuple[int, int]) -> Tensor:
    """Top-left h*w coefficient block, flattened row-major."""
    coeffs = _check_image(coeffs, "coeffs")
    bh, bw = block
    if not (1 <= bh <= coeffs.shape[0] and 1 <= bw <= coeffs.shape[1]):
        raise ValueError(f"block {block} exceeds coefficient grid {coeffs.shape}")
    return np.ascontiguousarray(coeffs[:bh, :bw], dtype=DTYPE).ravel()


def embed_low_freq(features: Tensor, block: tuple[int, int],
                   target: tuple[int, int]) -> DctCoeffs:
    """Place a flat low-frequency block top-left in a zero coefficient grid."""
    features = np.asarray(features).ravel()
    bh, bw = block
    th, tw = target
    if features.size != bh * bw:
        raise ValueError(f"expected {bh * bw} features for block {block}, got {features.size}")
    if bh > th or bw > tw:
        raise ValueError(f"block {block} exceeds target {target}")
    coeffs = np.zeros((th, tw), dtype=DTYPE)
    coeffs[:bh, :bw] = features.reshape(bh, bw)
    return coeffs


def mse(a: Tensor, b: Tensor) -> float:
    """Mean squared error on the 8-bit [0,255] pixel scale.

    Inputs are [0,1] images; differences are multiplied by 255 before
    squaring so scores are comparable with 8-bit-image conventions.
    """
    a = _check_image(a, "a")
    b = _check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = (a.astype(np.float64) - b.astype(np.float64)) * 255.0
    return float(np.mean(diff * diff))


@dataclass(frozen=True)
class CwSsimConfig:
    orientations: int = 4
    wavelengths: tuple[float, ...] = (4.0, 8.0)
    window: int = 7
    stabilizer: float = 0.01

    def __post_init__(self):
        if self.orientations < 1:
            raise ValueError("orientations must be >= 1")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if any(w <= 2 for w in self.wavelengths) or not self.wavelengths:
            raise ValueError("all wavelengths must be > 2 pixels")
        if self.stabilizer <= 0:
            raise ValueError("stabilizer must be > 0")


@lru_cache(maxsize=8)
def _gabor_bank(config: CwSsimConfig):
    """Complex Gabor kernels, one per (wavelength, orientation).

    Each kernel has its mean subtracted (exactly zero DC response) and is
    scaled to unit L2 norm. Returns [(kernel, half_width), ...] ordered
    wavelength-major.
    """
    bank = []
    for lam in config.wavelengths:
        sigma = 0.56 * lam
        half = math.ceil(4.0 * sigma)
        y, x = np.mgrid[-half:half + 1, -half:half + 1]
        envelope = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
        for k in range(config.orientations):
            theta = math.pi * k / config.orientations
            xr = x * math.cos(theta) + y * math.sin(theta)
            kernel = envelope * np.exp(2j * np.pi * xr / lam)
            kernel -= kernel.mean()
            kernel /= np.sqrt(np.sum(np.abs(kernel) ** 2))
            bank.append((kernel, half))
    return bank


def cwt(image: Tensor, config: CwSsimConfig | None = None) -> np.ndarray:
    """Complex wavelet coefficients: stack [wavelengths*orientations, H, W].

    Each subband is the "same"-mode zero-padded convolution of the image
    with one complex Gabor kernel, ordered wavelength-major.
    """
    config = config or CwSsimConfig()
    image = _check_image(image).astype(np.float64)
    bank = _gabor_bank(config)
    max_size = 2 * max(half for _, half in bank) + 1
    if image.shape[0] < max_size or image.shape[1] < max_size:
        raise ValueError(
            f"image {image.shape} smaller than kernel support {max_size}x{max_size}")
    return np.stack([fftconvolve(image, kernel, mode="same") for kernel, _ in bank])


def _window_sums(a: np.ndarray, win: int) -> np.ndarray:
    """Sums over disjoint win*win tiles; trailing partial tiles dropped."""
    nh, nw = a.shape[0] // win, a.shape[1] // win
    a = a[:nh * win, :nw * win]
    return a.reshape(nh, win, nw, win).sum(axis=(1, 3))


def cw_ssim(a: Tensor, b: Tensor, config: CwSsimConfig | None = None) -> float:
    """Complex-wavelet structural similarity in (0, 1], 1 for identical images.

    Per disjoint window of coefficients within each subband:
        S = (2*|sum(c_a * conj(c_b))| + K) / (sum|c_a|^2 + sum|c_b|^2 + K)
    Borders contaminated by the convolution padding are trimmed by each
    kernel's half-width before windowing. The score is the mean of S over
    windows, then over subbands.
    """
    config = config or CwSsimConfig()
    a = _check_image(a, "a")
    b = _check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ca = cwt(a, config)
    cb = cwt(b, config)
    k = config.stabilizer
    win = config.window
    scores = []
    for (_, half), sa, sb in zip(_gabor_bank(config), ca, cb):
        ta = sa[half:sa.shape[0] - half, half:sa.shape[1] - half]
        tb = sb[half:sb.shape[0] - half, half:sb.shape[1] - half]
        if ta.shape[0] < win or ta.shape[1] < win:
            raise ValueError(
                f"image too small: {win}x{win} window does not fit the "
                f"{ta.shape} interior left after trimming borders")
        cross = _window_sums(ta * np.conj(tb), win)
        ea = _window_sums(ta.real * ta.real + ta.imag * ta.imag, win)
        eb = _window_sums(tb.real * tb.real + tb.imag * tb.imag, win)
        s = (2.0 * np.abs(cross) + k) / (ea + eb + k)
        scores.append(float(np.mean(s)))
    return float(np.mean(scores))
