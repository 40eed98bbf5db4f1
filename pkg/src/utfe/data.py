"""Image ingestion and synthesis.

Binary PGM (P5, 8-bit) read/write, ROI crop with bicubic resampling to
the 50x60 working size, multiplicative speckle corruption, a seeded
generator of synthetic tongue-surface-style images (dark field, bright
curved band, speckle texture, optional fan mask), and train/test
splitting. All public outputs are float32 [H,W] arrays with pixels in
[0,1]; corpora are stacked [N,H,W] arrays.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, Rng, Tensor

IMAGE_H = 50
IMAGE_W = 60

MANIFEST_NAME = "manifest.tsv"


# ---------------------------------------------------------------------------
# PGM (P5) files

def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos]
        if c in b" \t\r\n":
            pos += 1
        elif c == ord("#"):
            nl = data.find(b"\n", pos)
            pos = n if nl < 0 else nl + 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in b" \t\r\n":
        pos += 1
    if start == pos:
        raise ValueError("truncated PGM header")
    return data[start:pos], pos


def load_pgm(path) -> Tensor:
    """Read a binary 8-bit PGM; pixels are returned scaled to [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    magic, pos = _next_token(data, 0)
    if magic != b"P5":
        raise ValueError(f"not a binary PGM (P5): magic {magic!r}")
    width, pos = _next_token(data, pos)
    height, pos = _next_token(data, pos)
    maxval, pos = _next_token(data, pos)
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError:
        raise ValueError("malformed PGM header") from None
    if maxval != 255:
        raise ValueError(f"unsupported PGM maxval {maxval} (expected 255)")
    if width < 1 or height < 1:
        raise ValueError(f"bad PGM dimensions {width}x{height}")
    payload = data[pos + 1:pos + 1 + width * height]  # single whitespace, then raster
    if len(payload) != width * height:
        raise ValueError(f"truncated PGM payload: {len(payload)} of {width * height} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return (pixels.astype(DTYPE) / DTYPE(255.0)).astype(DTYPE)


def _atomic_write_bytes(path, blob: bytes) -> None:
    """Write via a temp file and rename so failures leave no partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_pgm(path, image: Tensor) -> None:
    """Write a [0,1] image as a binary 8-bit PGM (canonical header)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite pixels")
    quantized = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode()
    _atomic_write_bytes(path, header + quantized.tobytes())


# ---------------------------------------------------------------------------
# ROI crop + bicubic resize

def _cubic_weights(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom-style cubic kernel, a = -0.5."""
    at = np.abs(t)
    w = np.where(
        at <= 1.0,
        1.5 * at**3 - 2.5 * at**2 + 1.0,
        np.where(at < 2.0, -0.5 * (at**3 - 5.0 * at**2 + 8.0 * at - 4.0), 0.0),
    )
    return w


def _resize_matrix(src_n: int, dst_n: int) -> np.ndarray:
    """[dst_n, src_n] row-stochastic resampling matrix with edge clamping."""
    scale = src_n / dst_n
    out = np.arange(dst_n, dtype=np.float64)
    src = (out + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    mat = np.zeros((dst_n, src_n), dtype=np.float64)
    rows = np.arange(dst_n)
    for k in range(-1, 3):
        idx = np.clip(base + k, 0, src_n - 1)
        np.add.at(mat, (rows, idx), _cubic_weights(src - (base + k)))
    return mat


def resize_bicubic(image: Tensor, out_shape: tuple[int, int]) -> Tensor:
    """Separable bicubic resample (a = -0.5, clamped edges), output in [0,1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {image.shape}")
    oh, ow = out_shape
    resized = _resize_matrix(image.shape[0], oh) @ image @ _resize_matrix(image.shape[1], ow).T
    return np.clip(resized, 0.0, 1.0).astype(DTYPE)


def preprocess(raw: Tensor, roi: tuple[int, int, int, int] | None = None,
               out_shape: tuple[int, int] = (IMAGE_H, IMAGE_W)) -> Tensor:
    """Crop a (top, left, height, width) ROI and resize to the working size.

    With roi=None the full frame is used. ROI extents must be >= 4 pixels
    per axis (the cubic kernel's support) and lie inside the frame.
    """
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {raw.shape}")
    if roi is None:
        roi = (0, 0, raw.shape[0], raw.shape[1])
    top, left, height, width = (int(v) for v in roi)
    if height < 4 or width < 4:
        raise ValueError(f"ROI extents must be >= 4, got {height}x{width}")
    if top < 0 or left < 0 or top + height > raw.shape[0] or left + width > raw.shape[1]:
        raise ValueError(f"ROI {roi} outside image bounds {raw.shape}")
    return resize_bicubic(raw[top:top + height, left:left + width], out_shape)


# ---------------------------------------------------------------------------
# Speckle corruption

@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def corrupt_with_rng(image: Tensor, sigma: float, rng: Rng) -> Tensor:
    """y = clamp(x + x*n, 0, 1), n ~ N(0, sigma^2) drawn row-major."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    image = np.asarray(image)
    noise = rng.normal(image.shape, 0.0, sigma)
    return np.clip(image + image * noise, 0.0, 1.0).astype(DTYPE)


def corrupt(image: Tensor, noise: NoiseConfig) -> Tensor:
    """Multiplicative speckle corruption, deterministic per noise.seed."""
    return corrupt_with_rng(image, noise.sigma, Rng(noise.seed))


# ---------------------------------------------------------------------------
# Synthetic corpus

@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    count: int = 1
    curvature_range: tuple[float, float] = (0.002, 0.012)
    band_width_range: tuple[float, float] = (1.4, 3.0)
    background_speckle: float = 0.5
    fan_mask: bool = True

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        for name in ("curvature_range", "band_width_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is degenerate: {lo} > {hi}")
        if self.background_speckle < 0:
            raise ValueError("background_speckle must be >= 0")


def image_seed(seed: int, index: int) -> int:
    """Per-image generator seed; lets corpus generation parallelize."""
    return Rng(seed).fork(index).seed


def _fan_mask() -> np.ndarray:
    """Fixed sector mask: wedge from an apex above the top edge."""
    apex_r, apex_c = -12.0, (IMAGE_W - 1) / 2.0
    rows = np.arange(IMAGE_H)[:, None] - apex_r
    cols = np.arange(IMAGE_W)[None, :] - apex_c
    angle = np.arctan2(cols, rows)
    radius = np.hypot(cols, rows)
    return (np.abs(angle) <= math.radians(38.0)) & (radius >= 13.0) & (radius <= 70.0)


def _uniform_in(rng: Rng, lo: float, hi: float) -> float:
    return float(rng.uniform((1,), lo, hi)[0])


def generate_synthetic(config: SynthConfig) -> Tensor:
    """Seeded synthetic 50x60 corpus, shape [count, 50, 60].

    Each frame is a dark background plus a bright parabolic band with a
    Gaussian cross-section, multiplied by speckle texture. Band pose
    parameters drift sinusoidally across frames to mimic smooth
    frame-to-frame tongue motion; the speckle texture is redrawn per
    frame from a derived seed, so frames can be generated independently.
    """
    base = Rng(config.seed)
    seq = base.fork(0xA11CE)

    c_lo, c_hi = config.curvature_range
    w_lo, w_hi = config.band_width_range
    center0 = _uniform_in(seq, 18.0, 32.0)
    curv0 = _uniform_in(seq, c_lo, c_hi)
    width0 = _uniform_in(seq, w_lo, w_hi)
    amp0 = _uniform_in(seq, 0.75, 0.95)
    tilt0 = _uniform_in(seq, -0.12, 0.12)
    # sinusoidal drift per parameter: (frequency cycles/frame, phase, amplitude)
    drift = {}
    for name, amp in (("center", 3.5), ("curv", 0.35 * (c_hi - c_lo) + 1e-9),
                      ("tilt", 0.06), ("shift", 4.0)):
        drift[name] = (_uniform_in(seq, 0.01, 0.06),
                       _uniform_in(seq, 0.0, 2.0 * math.pi), amp)

    def drifted(name: str, base_value: float, i: int) -> float:
        freq, phase, amp = drift[name]
        return base_value + amp * math.sin(2.0 * math.pi * freq * i + phase)

    rows = np.arange(IMAGE_H, dtype=np.float64)[:, None]
    cols = np.arange(IMAGE_W, dtype=np.float64)[None, :]
    mask = _fan_mask() if config.fan_mask else None

    frames = np.empty((config.count, IMAGE_H, IMAGE_W), dtype=DTYPE)
    for i in range(config.count):
        center = min(max(drifted("center", center0, i), 12.0), 40.0)
        curv = min(max(drifted("curv", curv0, i), c_lo), c_hi)
        tilt = drifted("tilt", tilt0, i)
        cx = (IMAGE_W - 1) / 2.0 + drifted("shift", 0.0, i)
        surface = center + tilt * (cols - cx) + curv * (cols - cx) ** 2
        band = amp0 * np.exp(-((rows - surface) ** 2) / (2.0 * width0**2))
        scene = 0.08 + band
        texture = Rng(image_seed(config.seed, i)).normal(
            (IMAGE_H, IMAGE_W), 1.0, config.background_speckle)
        frame = scene * np.maximum(texture, 0.0)
        if mask is not None:
            frame = frame * mask
        frames[i] = np.clip(frame, 0.0, 1.0).astype(DTYPE)
    return frames


# ---------------------------------------------------------------------------
# Splits and corpus files

def split(images: Tensor, train_fraction: float, seed: int):
    """Seeded shuffle then partition; train size is floor(fraction * N)."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError(f"train_fraction must be in (0,1), got {train_fraction}")
    images = np.asarray(images)
    n = images.shape[0]
    perm = Rng(seed).permutation(n)
    k = math.floor(train_fraction * n)
    return images[perm[:k]], images[perm[k:]]


def write_corpus(directory, images: Tensor, seeds=None) -> list[str]:
    """Write numbered PGMs plus a manifest of "filename<TAB>seed" lines."""
    images = np.asarray(images)
    os.makedirs(directory, exist_ok=True)
    if seeds is None:
        seeds = [0] * images.shape[0]
    names = []
    lines = []
    for i, image in enumerate(images):
        name = f"img_{i:05d}.pgm"
        save_pgm(os.path.join(directory, name), image)
        names.append(name)
        lines.append(f"{name}\t{seeds[i]}\n")
    _atomic_write_bytes(os.path.join(directory, MANIFEST_NAME), "".join(lines).encode())
    return names


def load_corpus(directory) -> Tensor:
    """Load a corpus directory: manifest order if present, else sorted PGMs."""
    manifest = os.path.join(directory, MANIFEST_NAME)
    if os.path.exists(manifest):
        with open(manifest, encoding="utf-8") as f:
            names = [line.split("\t")[0].strip() for line in f if line.strip()]
    else:
        names = sorted(n for n in os.listdir(directory) if n.endswith(".pgm"))
    if not names:
        raise ValueError(f"no images found in {directory}")
    images = [load_pgm(os.path.join(directory, n)) for n in names]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"corpus images disagree on shape: {sorted(shapes)}")
    return np.stack(images)
