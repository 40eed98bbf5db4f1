"""Feature extractors behind one contract: optional training, encode to a
K-dimensional feature vector, reconstruct an image from features.

Five kinds share the contract. "dct" is training-free low-frequency
coefficient selection; "ae"/"dae" are the dense bottleneck autoencoder
(1000-500-250-K and its mirror); "cae"/"dcae" are the convolutional
autoencoder (8x8/32, 6x6/16, 4x4/C encoder with pooling schedule
(2,2)-(5,5)-(1,1), mirrored decoder with nearest upsampling). The "d"
variants train on speckle-corrupted inputs.

Models serialize to a self-describing little-endian binary format
(magic "UTFE") with a trailing CRC32.
"""

from __future__ import annotations

import math
import re
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import NoiseConfig, corrupt_with_rng, _atomic_write_bytes
from .signal import dct2, idct2, embed_low_freq, select_low_freq
from .tensor import DTYPE, Rng, Tensor

KINDS = ("dct", "ae", "dae", "cae", "dcae")
CONV_KINDS = ("cae", "dcae")
DENSE_KINDS = ("ae", "dae")
DENOISING_KINDS = ("dae", "dcae")

MODEL_MAGIC = b"UTFE"
MODEL_VERSION = 1


class ModelFormatError(Exception):
    """Base for model-file deserialization failures."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


_FEATURE_RE = re.compile(r"^\s*(\d+)\s*[x×]\s*\(\s*(\d+)\s*,\s*(\d+)\s*\)\s*$")


@dataclass(frozen=True)
class FeatureSize:
    """Encoder feature geometry: C channel maps of size map_h x map_w."""

    channels: int
    map_h: int
    map_w: int

    def __post_init__(self):
        if min(self.channels, self.map_h, self.map_w) < 1:
            raise ValueError(f"feature size extents must be >= 1: {self}")

    @property
    def length(self) -> int:
        return self.channels * self.map_h * self.map_w

    @classmethod
    def parse(cls, text: str) -> "FeatureSize":
        m = _FEATURE_RE.match(text)
        if not m:
            raise ValueError(f"cannot parse feature size {text!r}, expected 'Cx(h,w)'")
        return cls(int(m.group(1)), int(m.group(2)), int(m.group(3)))

    def __str__(self) -> str:
        return f"{self.channels}x({self.map_h},{self.map_w})"


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    noise: NoiseConfig | None = None
    denoising_target: str = "clean"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.denoising_target not in ("clean", "noisy"):
            raise ValueError(f"denoising_target must be clean|noisy, got {self.denoising_target!r}")


class ExtractorModel:
    """One extractor: kind, feature geometry, and (for autoencoders) layers.

    A model whose training has finished is immutable in practice: encode
    and reconstruct never mutate layer state, so concurrent use is safe.
    """

    def __init__(self, kind: str, feature_size: FeatureSize,
                 input_shape: tuple[int, int] = (50, 60),
                 encoder=(), decoder=()):
        if kind not in KINDS:
            raise ValueError(f"unknown extractor kind {kind!r}")
        self.kind = kind
        self.feature_size = feature_size
        self.input_shape = (int(input_shape[0]), int(input_shape[1]))
        self.encoder = list(encoder)
        self.decoder = list(decoder)
        self.epochs_trained = 0
        self.final_loss = float("nan")
        self.seed = 0
        if kind == "dct":
            if self.encoder or self.decoder:
                raise ValueError("dct extractor takes no layers")
            if feature_size.channels != 1:
                raise ValueError("dct feature size must have 1 channel")
            if feature_size.map_h > input_shape[0] or feature_size.map_w > input_shape[1]:
                raise ValueError(f"dct block {feature_size} exceeds input {input_shape}")
        else:
            self._check_shapes()

    # -- shape bookkeeping ---------------------------------------------------

    def _sample_in_shape(self) -> tuple[int, ...]:
        h, w = self.input_shape
        return (1, h, w) if self.kind in CONV_KINDS else (h, w)

    def _feature_shape(self) -> tuple[int, ...]:
        fs = self.feature_size
        if self.kind in CONV_KINDS:
            return (fs.channels, fs.map_h, fs.map_w)
        return (fs.length,)

    def _check_shapes(self) -> None:
        enc = nn.infer_shapes([l.spec for l in self.encoder], self._sample_in_shape())
        if enc[-1] != self._feature_shape():
            raise ValueError(
                f"encoder produces {enc[-1]}, expected {self._feature_shape()}")
        dec = nn.infer_shapes([l.spec for l in self.decoder], self._feature_shape())
        out = (1,) + self.input_shape if self.kind in CONV_KINDS else self.input_shape
        if dec[-1] != out:
            raise ValueError(f"decoder produces {dec[-1]}, expected {out}")

    def layers(self) -> list:
        return self.encoder + self.decoder

    def _net_batch(self, images: np.ndarray) -> np.ndarray:
        return images[:, None] if self.kind in CONV_KINDS else images

    # -- the extractor contract ----------------------------------------------

    def encode(self, image: Tensor) -> Tensor:
        """Feature vector of length K = C*h*w, flattened row-major."""
        image = np.asarray(image)
        if image.shape != self.input_shape:
            raise ValueError(f"expected image {self.input_shape}, got {image.shape}")
        fs = self.feature_size
        if self.kind == "dct":
            return select_low_freq(dct2(image), (fs.map_h, fs.map_w))
        x = image[None] if self.kind in CONV_KINDS else image
        y, _ = nn.run_forward(self.encoder, x)
        return np.ascontiguousarray(y, dtype=DTYPE).ravel()

    def reconstruct(self, features: Tensor) -> Tensor:
        """Image in [0,1] of the model's input shape, decoded from features."""
        features = np.asarray(features).ravel()
        fs = self.feature_size
        if features.size != fs.length:
            raise ValueError(f"expected {fs.length} features, got {features.size}")
        if self.kind == "dct":
            coeffs = embed_low_freq(features, (fs.map_h, fs.map_w), self.input_shape)
            return np.clip(idct2(coeffs), 0.0, 1.0).astype(DTYPE)
        z = features.reshape(self._feature_shape()).astype(DTYPE)
        y, _ = nn.run_forward(self.decoder, z)
        if self.kind in CONV_KINDS:
            y = y[0]
        return y.astype(DTYPE, copy=False)


def build_dct_extractor(block: tuple[int, int] = (5, 6),
                        input_shape: tuple[int, int] = (50, 60)) -> ExtractorModel:
    """Training-free low-frequency DCT extractor for an h*w block."""
    return ExtractorModel("dct", FeatureSize(1, block[0], block[1]), input_shape)


def build_conv_autoencoder(feature_size: FeatureSize,
                           input_shape: tuple[int, int] = (50, 60),
                           kind: str = "cae") -> ExtractorModel:
    """Convolutional autoencoder for 50x60 inputs and (5,6) feature maps.

    Encoder: conv 8x8/32 + pool(2,2), conv 6x6/16 + pool(5,5),
    conv 4x4/C + pool(1,1). Decoder mirrors with nearest upsampling and a
    sigmoid output conv. Channel counts C in {1,2} are supported; weights
    start at zero and are initialized by train().
    """
    if kind not in CONV_KINDS:
        raise ValueError(f"kind must be one of {CONV_KINDS}, got {kind!r}")
    if (feature_size.map_h, feature_size.map_w) != (5, 6) or feature_size.channels not in (1, 2):
        raise ValueError(f"unsupported feature geometry {feature_size}; "
                         "supported: 1x(5,6) and 2x(5,6)")
    if tuple(input_shape) != (50, 60):
        raise ValueError(f"the pooling schedule requires 50x60 inputs, got {input_shape}")
    c = feature_size.channels
    encoder = [
        nn.Conv2d(1, 32, 8, 8), nn.ReLU(), nn.MaxPool2d(2, 2),
        nn.Conv2d(32, 16, 6, 6), nn.ReLU(), nn.MaxPool2d(5, 5),
        nn.Conv2d(16, c, 4, 4), nn.ReLU(), nn.MaxPool2d(1, 1),
    ]
    decoder = [
        nn.Upsample2d(1, 1), nn.Conv2d(c, 16, 4, 4), nn.ReLU(),
        nn.Upsample2d(5, 5), nn.Conv2d(16, 32, 6, 6), nn.ReLU(),
        nn.Upsample2d(2, 2), nn.Conv2d(32, 1, 8, 8, init="glorot"), nn.Sigmoid(),
    ]
    return ExtractorModel(kind, feature_size, input_shape, encoder, decoder)


def build_dense_autoencoder(k: int, input_shape: tuple[int, int] = (50, 60),
                            kind: str = "ae") -> ExtractorModel:
    """Dense autoencoder: flatten - 1000 - 500 - 250 - K and its mirror."""
    if kind not in DENSE_KINDS:
        raise ValueError(f"kind must be one of {DENSE_KINDS}, got {kind!r}")
    if k not in (30, 60):
        raise ValueError(f"bottleneck K must be 30 or 60, got {k}")
    h, w = input_shape
    n = h * w
    encoder = [
        nn.Flatten((h, w)),
        nn.Dense(n, 1000), nn.ReLU(),
        nn.Dense(1000, 500), nn.ReLU(),
        nn.Dense(500, 250), nn.ReLU(),
        nn.Dense(250, k), nn.ReLU(),
    ]
    decoder = [
        nn.Dense(k, 250), nn.ReLU(),
        nn.Dense(250, 500), nn.ReLU(),
        nn.Dense(500, 1000), nn.ReLU(),
        nn.Dense(1000, n, init="glorot"), nn.Sigmoid(),
        nn.Reshape((h, w)),
    ]
    return ExtractorModel(kind, FeatureSize(1, k, 1), input_shape, encoder, decoder)


def build_extractor(kind: str, feature_size: FeatureSize,
                    input_shape: tuple[int, int] = (50, 60)) -> ExtractorModel:
    """Dispatch on kind; dense kinds require a 1x(K,1) feature size."""
    if kind == "dct":
        return build_dct_extractor((feature_size.map_h, feature_size.map_w), input_shape)
    if kind in CONV_KINDS:
        return build_conv_autoencoder(feature_size, input_shape, kind)
    if kind in DENSE_KINDS:
        if feature_size.channels != 1 or feature_size.map_w != 1:
            raise ValueError(f"dense extractors use 1x(K,1) features, got {feature_size}")
        return build_dense_autoencoder(feature_size.map_h, input_shape, kind)
    raise ValueError(f"unknown extractor kind {kind!r}")


def train(model: ExtractorModel, images: Tensor, config: TrainConfig, on_epoch=None):
    """Train an autoencoder model in place; returns (model, loss history).

    Weights are (re)initialized from config.seed, then config.epochs
    passes of shuffled minibatches run forward, MSE loss, backward, and
    an Adam step. Denoising kinds corrupt the encoder input with fresh
    speckle noise each presentation while the loss target stays the clean
    image (or the corrupted one when denoising_target="noisy"). The
    result is fully determined by (seed, config, dataset); init, shuffle,
    and noise draw from independent derived streams, so sigma = 0 makes
    a denoising run bit-identical to its plain counterpart. config.noise
    supplies the corruption strength; its seed field is not consulted
    here. on_epoch(epoch_index, mean_loss) is called after each epoch.
    """
    if model.kind == "dct":
        raise ValueError("the dct extractor is training-free")
    images = np.ascontiguousarray(images, dtype=DTYPE)
    if images.ndim != 3 or images.shape[0] == 0:
        raise ValueError(f"expected a non-empty [N,H,W] dataset, got {images.shape}")
    if images.shape[1:] != model.input_shape:
        raise ValueError(f"dataset images {images.shape[1:]} do not match "
                         f"model input {model.input_shape}")
    denoising = model.kind in DENOISING_KINDS
    if denoising and config.noise is None:
        raise ValueError(f"kind {model.kind!r} requires a noise config")
    if not denoising and config.noise is not None:
        raise ValueError(f"kind {model.kind!r} does not take a noise config")

    root = Rng(config.seed)
    init_rng, shuffle_rng, noise_rng = root.fork(0), root.fork(1), root.fork(2)
    for layer in model.layers():
        layer.init_weights(init_rng)
    layers = model.layers()
    adam = nn.Adam(nn.collect_params(layers),
                   nn.AdamConfig(learning_rate=config.learning_rate))

    n = images.shape[0]
    sigma = config.noise.sigma if denoising else 0.0
    history = []
    per_sample = np.empty(n, dtype=np.float64)
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            clean = images[idx]
            if denoising:
                inputs = corrupt_with_rng(clean, sigma, noise_rng)
                target = clean if config.denoising_target == "clean" else inputs
            else:
                inputs = target = clean
            y, caches = nn.run_forward(layers, model._net_batch(inputs))
            diff = y - model._net_batch(target)
            per_sample[idx] = (diff.astype(np.float64) ** 2).reshape(len(idx), -1).mean(axis=1)
            _, grads = nn.run_backward(layers, caches, (2.0 / diff.size) * diff)
            adam.step(grads)
        epoch_loss = float(per_sample.mean())
        if not math.isfinite(epoch_loss):
            raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch + 1}")
        history.append(epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)

    model.epochs_trained = config.epochs
    model.final_loss = history[-1]
    model.seed = config.seed
    return model, history


# ---------------------------------------------------------------------------
# Model files: magic, version u16, kind u8, input shape, feature size,
# training metadata, layer-spec table, raw little-endian float32 weights
# in declaration order, trailing CRC32 of everything before it.

def save_model(model: ExtractorModel, path) -> None:
    buf = bytearray()
    buf += MODEL_MAGIC
    buf += struct.pack("<HB", MODEL_VERSION, KINDS.index(model.kind))
    buf += struct.pack("<II", *model.input_shape)
    fs = model.feature_size
    buf += struct.pack("<III", fs.channels, fs.map_h, fs.map_w)
    buf += struct.pack("<IQf", model.epochs_trained, model.seed & (2**64 - 1),
                       model.final_loss)
    buf += struct.pack("<HH", len(model.encoder), len(model.decoder))
    for layer in model.layers():
        spec = layer.spec
        buf += struct.pack("<BB", nn.LAYER_KINDS.index(spec.kind), len(spec.params))
        buf += struct.pack(f"<{len(spec.params)}I", *spec.params)
    for layer in model.layers():
        for param in layer.params():
            buf += np.ascontiguousarray(param.value, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    _atomic_write_bytes(path, bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise TruncatedFileError(
                f"model file ends at byte {len(self.data)}, "
                f"needed {self.pos + count}")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_model(data: bytes) -> ExtractorModel:
    r = _Reader(data)
    kind_idx, = r.unpack("<B")
    if kind_idx >= len(KINDS):
        raise ValueError(f"invalid kind byte {kind_idx}")
    kind = KINDS[kind_idx]
    in_h, in_w = r.unpack("<II")
    c, fh, fw = r.unpack("<III")
    epochs, seed, final_loss = r.unpack("<IQf")
    n_enc, n_dec = r.unpack("<HH")
    specs = []
    for _ in range(n_enc + n_dec):
        k_idx, n_par = r.unpack("<BB")
        params = r.unpack(f"<{n_par}I")
        if k_idx >= len(nn.LAYER_KINDS):
            raise ValueError(f"invalid layer kind byte {k_idx}")
        specs.append(nn.LayerSpec(nn.LAYER_KINDS[k_idx], params))
    layers = [nn.build_layer(spec) for spec in specs]
    for layer in layers:
        for param in layer.params():
            count = param.value.size
            raw = np.frombuffer(r.take(4 * count), dtype="<f4")
            param.value = raw.reshape(param.value.shape).astype(DTYPE)
    if r.pos != len(data) - 4:
        raise ValueError(f"{len(data) - 4 - r.pos} unexpected trailing bytes")
    model = ExtractorModel(kind, FeatureSize(c, fh, fw), (in_h, in_w),
                           layers[:n_enc], layers[n_enc:])
    model.epochs_trained = epochs
    model.seed = seed
    model.final_loss = float(final_loss)
    return model


def _verify_crc(data: bytes) -> None:
    stored, = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumError("model file CRC32 mismatch")


def load_model(path) -> ExtractorModel:
    """Load a model file; raises a distinct ModelFormatError per defect."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise TruncatedFileError(f"model file has only {len(data)} bytes")
    if data[:4] != MODEL_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}")
    if len(data) < 6:
        raise TruncatedFileError("model file ends inside the version field")
    version, = struct.unpack("<H", data[4:6])
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"unsupported format version {version}")
    if len(data) < 10:
        raise TruncatedFileError("model file too short for header and checksum")
    try:
        model = _parse_model(data[6:])
    except TruncatedFileError:
        raise
    except (ValueError, struct.error) as exc:
        # malformed content: blame corruption if the checksum disagrees
        _verify_crc(data)
        raise ValueError(f"invalid model file: {exc}") from exc
    _verify_crc(data)
    return model
