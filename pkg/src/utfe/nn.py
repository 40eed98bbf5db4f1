"""Neural-network layers with hand-derived forward/backward passes.

Dense, 2D convolution (zero-padded "same", stride 1), max-pooling,
nearest-neighbor upsampling, sigmoid/relu, flatten/reshape, MSE loss, and
the Adam optimizer. No autodiff: each layer's backward is the exact
gradient of its forward map, derived by hand and checked against finite
differences in the test suite.

Layer forwards accept either a single sample (conv-family: [C,H,W],
dense: [in]) or a batch with a leading N axis; backward mirrors the call.
forward returns (output, cache) and backward(cache, grad_out) returns
(grad_input, [param grads]) so a frozen model stays read-only under
concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .tensor import DTYPE, Rng, Tensor

LAYER_KINDS = (
    "dense",
    "conv2d",
    "maxpool2d",
    "upsample2d",
    "sigmoid",
    "relu",
    "flatten",
    "reshape",
)


@dataclass(frozen=True)
class LayerSpec:
    """Architecture descriptor: kind plus kind-specific integer parameters.

    params by kind:
      dense      (in_units, out_units)
      conv2d     (in_channels, out_channels, kernel_h, kernel_w)
      maxpool2d  (pool_h, pool_w)
      upsample2d (factor_h, factor_w)
      flatten    per-sample input extents
      reshape    target shape extents (input is a flat vector)
      others     ()
    """

    kind: str
    params: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if any(p < 1 for p in self.params):
            raise ValueError(f"layer parameters must be >= 1, got {self.params}")


def spec_output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape of a layer, or ValueError if it cannot apply."""
    kind, p = spec.kind, spec.params
    if kind == "dense":
        if in_shape != (p[0],):
            raise ValueError(f"dense expects input ({p[0]},), got {in_shape}")
        return (p[1],)
    if kind == "conv2d":
        if len(in_shape) != 3 or in_shape[0] != p[0]:
            raise ValueError(f"conv2d expects ({p[0]},H,W), got {in_shape}")
        return (p[1], in_shape[1], in_shape[2])
    if kind == "maxpool2d":
        if len(in_shape) != 3:
            raise ValueError(f"maxpool2d expects (C,H,W), got {in_shape}")
        c, h, w = in_shape
        if h % p[0] or w % p[1]:
            raise ValueError(f"pool {p} does not tile input {in_shape}")
        return (c, h // p[0], w // p[1])
    if kind == "upsample2d":
        if len(in_shape) != 3:
            raise ValueError(f"upsample2d expects (C,H,W), got {in_shape}")
        return (in_shape[0], in_shape[1] * p[0], in_shape[2] * p[1])
    if kind == "flatten":
        if in_shape != p:
            raise ValueError(f"flatten declared for {p}, got {in_shape}")
        return (math.prod(p),)
    if kind == "reshape":
        if in_shape != (math.prod(p),):
            raise ValueError(f"cannot reshape {in_shape} to {p}")
        return p
    return in_shape  # sigmoid / relu


def infer_shapes(specs, in_shape) -> list[tuple[int, ...]]:
    """Shape at every layer boundary, [input, after layer 0, ...]."""
    shapes = [tuple(in_shape)]
    for spec in specs:
        shapes.append(spec_output_shape(spec, shapes[-1]))
    return shapes


class Param:
    """One trainable tensor with its Adam moment accumulators."""

    __slots__ = ("value", "m", "v")

    def __init__(self, value: Tensor):
        self.value = value
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)


def _init_uniform(rng: Rng, shape, fan_in: int, fan_out: int, scheme: str) -> Tensor:
    if scheme == "he":
        limit = math.sqrt(6.0 / fan_in)
    elif scheme == "glorot":
        limit = math.sqrt(6.0 / (fan_in + fan_out))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return rng.uniform(shape, -limit, limit)


def _promote(x: np.ndarray, sample_ndim: int):
    if x.ndim == sample_ndim:
        return x[None], True
    if x.ndim == sample_ndim + 1:
        return x, False
    raise ValueError(f"expected {sample_ndim}- or {sample_ndim + 1}-d input, got {x.ndim}-d")


class Layer:
    """Base layer: forward(x) -> (y, cache); backward(cache, gy) -> (gx, grads)."""

    spec: LayerSpec

    def params(self) -> list[Param]:
        return []

    def init_weights(self, rng: Rng) -> None:
        """Redraw weights from the generator; zero biases and moments."""

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, gy):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, in_units: int, out_units: int, rng: Rng | None = None,
                 init: str = "he"):
        self.spec = LayerSpec("dense", (in_units, out_units))
        self.init = init
        self.w = Param(np.zeros((out_units, in_units), dtype=DTYPE))
        self.b = Param(np.zeros(out_units, dtype=DTYPE))
        if rng is not None:
            self.init_weights(rng)

    def params(self):
        return [self.w, self.b]

    def init_weights(self, rng):
        in_units, out_units = self.spec.params
        self.w = Param(_init_uniform(rng, (out_units, in_units), in_units,
                                     out_units, self.init))
        self.b = Param(np.zeros(out_units, dtype=DTYPE))

    def forward(self, x):
        xb, squeeze = _promote(np.asarray(x), 1)
        if xb.shape[1] != self.spec.params[0]:
            raise ValueError(f"dense expects {self.spec.params[0]} inputs, got {xb.shape[1]}")
        y = xb @ self.w.value.T + self.b.value
        return (y[0] if squeeze else y), (xb, squeeze)

    def backward(self, cache, gy):
        xb, squeeze = cache
        gyb = gy[None] if squeeze else gy
        gx = gyb @ self.w.value
        gw = gyb.T @ xb
        gb = gyb.sum(axis=0)
        return (gx[0] if squeeze else gx), [gw, gb]


class Conv2d(Layer):
    """Channel-first 2D cross-correlation, zero-padded "same", stride 1.

    Even kernels pad (k-1)//2 before and k//2 after, so output spatial
    size always equals input spatial size.

    Forward and both gradient maps reduce to single large GEMMs against a
    patch tensor held channel-major. The patch tensor is built on the
    input side (classic im2col) while its in_channels*kernel_h*kernel_w
    feature rows stay modest; for very wide-fan-in kernels the dual
    scatter form is used instead (per-tap 1x1 products shifted into
    place), which materializes out_channels*kernel_h*kernel_w rows.
    """

    # patch-row budget above which forward switches to the scatter form
    _GATHER_LIMIT = 1536

    def __init__(self, in_channels: int, out_channels: int, kernel_h: int,
                 kernel_w: int, rng: Rng | None = None, init: str = "he"):
        self.spec = LayerSpec("conv2d", (in_channels, out_channels, kernel_h, kernel_w))
        self.init = init
        shape = (out_channels, in_channels, kernel_h, kernel_w)
        self.w = Param(np.zeros(shape, dtype=DTYPE))
        self.b = Param(np.zeros(out_channels, dtype=DTYPE))
        if rng is not None:
            self.init_weights(rng)

    def params(self):
        return [self.w, self.b]

    def init_weights(self, rng):
        in_c, out_c, kh, kw = self.spec.params
        self.w = Param(_init_uniform(rng, (out_c, in_c, kh, kw),
                                     in_c * kh * kw, out_c * kh * kw, self.init))
        self.b = Param(np.zeros(out_c, dtype=DTYPE))

    def _pads(self):
        _, _, kh, kw = self.spec.params
        return (kh - 1) // 2, kh - 1 - (kh - 1) // 2, (kw - 1) // 2, kw - 1 - (kw - 1) // 2

    def forward(self, x):
        in_c, out_c, kh, kw = self.spec.params
        xb, squeeze = _promote(np.asarray(x), 3)
        n, c, h, w = xb.shape
        if c != in_c:
            raise ValueError(f"conv2d expects {in_c} input channels, got {c}")
        pt, pb, pl, pr = self._pads()
        hp, wp = h + kh - 1, w + kw - 1
        # channel-major padded input [C,N,Hp,Wp]: every product below becomes
        # one large GEMM instead of N small ones
        xpt = np.pad(xb.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        if in_c * kh * kw <= self._GATHER_LIMIT:
            cols = np.empty((in_c, kh, kw, n, h, w), dtype=xpt.dtype)
            for u in range(kh):
                for v in range(kw):
                    cols[:, u, v] = xpt[:, :, u:u + h, v:v + w]
            colm = cols.reshape(in_c * kh * kw, n * h * w)
            yt = self.w.value.reshape(out_c, -1) @ colm
            core = colm
        else:
            # per-tap 1x1 products z[(o,u,v)] = sum_c W[o,c,u,v] * x_pad[c],
            # shifted into place: y[o,n,i,j] = sum_{u,v} z[(o,u,v),n,i+u,j+v]
            wz = self.w.value.transpose(0, 2, 3, 1).reshape(out_c * kh * kw, in_c)
            z = (wz @ xpt.reshape(in_c, n * hp * wp)).reshape(out_c, kh, kw, n, hp, wp)
            yt = np.zeros((out_c, n, h, w), dtype=z.dtype)
            for u in range(kh):
                for v in range(kw):
                    yt += z[:, u, v, :, u:u + h, v:v + w]
            yt = yt.reshape(out_c, n * h * w)
            core = xpt
        yt += self.b.value[:, None]
        y = np.ascontiguousarray(yt.reshape(out_c, n, h, w).transpose(1, 0, 2, 3))
        gathered = core is not xpt
        return (y[0] if squeeze else y), ((n, c, h, w), core, gathered, squeeze)

    def backward(self, cache, gy):
        in_c, out_c, kh, kw = self.spec.params
        (n, c, h, w), core, gathered, squeeze = cache
        gyb = gy[None] if squeeze else gy
        if gyb.shape != (n, out_c, h, w):
            raise ValueError(f"grad shape {gyb.shape} does not match output "
                             f"{(n, out_c, h, w)}")
        pt, pb, pl, pr = self._pads()
        hp, wp = h + kh - 1, w + kw - 1
        gt = np.ascontiguousarray(gyb.transpose(1, 0, 2, 3))
        gtm = gt.reshape(out_c, n * h * w)
        gb = gtm.sum(axis=1)
        if gathered:
            colm = core
            gw = (gtm @ colm.T).reshape(self.w.value.shape)
            gcols = (self.w.value.reshape(out_c, -1).T @ gtm)
            gcols = gcols.reshape(in_c, kh, kw, n, h, w)
            gxpt = np.zeros((in_c, n, hp, wp), dtype=gcols.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxpt[:, :, u:u + h, v:v + w] += gcols[:, u, v]
        else:
            xpt = core
            gz = np.zeros((out_c, kh, kw, n, hp, wp), dtype=gt.dtype)
            for u in range(kh):
                for v in range(kw):
                    gz[:, u, v, :, u:u + h, v:v + w] = gt
            gzm = gz.reshape(out_c * kh * kw, n * hp * wp)
            gw = (gzm @ xpt.reshape(in_c, -1).T).reshape(out_c, kh, kw, in_c)
            gw = np.ascontiguousarray(gw.transpose(0, 3, 1, 2))
            wz = self.w.value.transpose(0, 2, 3, 1).reshape(out_c * kh * kw, in_c)
            gxpt = (wz.T @ gzm).reshape(in_c, n, hp, wp)
        gx = gxpt[:, :, pt:pt + h, pl:pl + w].transpose(1, 0, 2, 3)
        gx = np.ascontiguousarray(gx)
        return (gx[0] if squeeze else gx), [gw, gb]


class MaxPool2d(Layer):
    """Disjoint-window max pooling; pool extents must tile the input.

    The argmax mask stores, per output cell, the flat row-major index of
    the winning element inside its window (first maximum wins on ties).
    """

    def __init__(self, pool_h: int, pool_w: int):
        self.spec = LayerSpec("maxpool2d", (pool_h, pool_w))

    def forward(self, x):
        ph, pw = self.spec.params
        xb, squeeze = _promote(np.asarray(x), 3)
        n, c, h, w = xb.shape
        if h % ph or w % pw:
            raise ValueError(f"pool ({ph},{pw}) does not tile input {(h, w)}")
        ho, wo = h // ph, w // pw
        windows = xb.reshape(n, c, ho, ph, wo, pw).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(n, c, ho, wo, ph * pw)
        mask = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, mask[..., None], axis=-1)[..., 0]
        cache = ((n, c, h, w), mask, squeeze)
        return (y[0] if squeeze else y), cache

    def backward(self, cache, gy):
        ph, pw = self.spec.params
        (n, c, h, w), mask, squeeze = cache
        gyb = gy[None] if squeeze else gy
        ho, wo = h // ph, w // pw
        if gyb.shape != (n, c, ho, wo):
            raise ValueError(f"grad shape {gyb.shape} does not match mask {(n, c, ho, wo)}")
        gwin = np.zeros((n, c, ho, wo, ph * pw), dtype=gyb.dtype)
        np.put_along_axis(gwin, mask[..., None], gyb[..., None], axis=-1)
        gx = gwin.reshape(n, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx[0] if squeeze else gx), []


class Upsample2d(Layer):
    """Nearest-neighbor replication by integer factors; backward sums windows."""

    def __init__(self, factor_h: int, factor_w: int):
        self.spec = LayerSpec("upsample2d", (factor_h, factor_w))

    def forward(self, x):
        fh, fw = self.spec.params
        xb, squeeze = _promote(np.asarray(x), 3)
        y = np.repeat(np.repeat(xb, fh, axis=2), fw, axis=3)
        return (y[0] if squeeze else y), (xb.shape, squeeze)

    def backward(self, cache, gy):
        fh, fw = self.spec.params
        (n, c, h, w), squeeze = cache
        gyb = gy[None] if squeeze else gy
        gx = gyb.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5))
        return (gx[0] if squeeze else gx), []


class Sigmoid(Layer):
    def __init__(self):
        self.spec = LayerSpec("sigmoid")

    def forward(self, x):
        y = expit(np.asarray(x))
        return y, y

    def backward(self, cache, gy):
        y = cache
        return gy * y * (1.0 - y), []


class ReLU(Layer):
    def __init__(self):
        self.spec = LayerSpec("relu")

    def forward(self, x):
        x = np.asarray(x)
        return np.maximum(x, 0), x > 0

    def backward(self, cache, gy):
        return gy * cache, []


class Flatten(Layer):
    """Row-major flatten of a declared per-sample shape to one vector."""

    def __init__(self, in_shape):
        self.spec = LayerSpec("flatten", tuple(int(s) for s in in_shape))

    def forward(self, x):
        xb, squeeze = _promote(np.asarray(x), len(self.spec.params))
        if xb.shape[1:] != self.spec.params:
            raise ValueError(f"flatten declared for {self.spec.params}, got {xb.shape[1:]}")
        y = xb.reshape(xb.shape[0], -1)
        return (y[0] if squeeze else y), squeeze

    def backward(self, cache, gy):
        squeeze = cache
        gyb = gy[None] if squeeze else gy
        gx = gyb.reshape((gyb.shape[0],) + self.spec.params)
        return (gx[0] if squeeze else gx), []


class Reshape(Layer):
    """Inverse of Flatten: a flat per-sample vector to the target shape."""

    def __init__(self, target):
        self.spec = LayerSpec("reshape", tuple(int(s) for s in target))

    def forward(self, x):
        xb, squeeze = _promote(np.asarray(x), 1)
        if xb.shape[1] != math.prod(self.spec.params):
            raise ValueError(f"cannot reshape {xb.shape[1]} values to {self.spec.params}")
        y = xb.reshape((xb.shape[0],) + self.spec.params)
        return (y[0] if squeeze else y), squeeze

    def backward(self, cache, gy):
        squeeze = cache
        gyb = gy[None] if squeeze else gy
        gx = gyb.reshape(gyb.shape[0], -1)
        return (gx[0] if squeeze else gx), []


def build_layer(spec: LayerSpec, rng: Rng | None = None, init: str = "he") -> Layer:
    """Instantiate a layer from its spec (zero weights when rng is None)."""
    kind, p = spec.kind, spec.params
    if kind == "dense":
        return Dense(p[0], p[1], rng, init)
    if kind == "conv2d":
        return Conv2d(p[0], p[1], p[2], p[3], rng, init)
    if kind == "maxpool2d":
        return MaxPool2d(p[0], p[1])
    if kind == "upsample2d":
        return Upsample2d(p[0], p[1])
    if kind == "sigmoid":
        return Sigmoid()
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten(p)
    if kind == "reshape":
        return Reshape(p)
    raise ValueError(f"unknown layer kind {kind!r}")


def run_forward(layers, x):
    """Forward through a layer list; returns (output, per-layer caches)."""
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def run_backward(layers, caches, gy):
    """Backward through a layer list; returns (grad_input, flat param grads).

    The flat gradient list aligns with the concatenation of layer.params()
    in layer order, matching collect_params().
    """
    grads_rev = []
    for layer, cache in zip(reversed(layers), reversed(caches)):
        gy, pgrads = layer.backward(cache, gy)
        grads_rev.append(pgrads)
    flat = []
    for pgrads in reversed(grads_rev):
        flat.extend(pgrads)
    return gy, flat


def collect_params(layers) -> list[Param]:
    params = []
    for layer in layers:
        params.extend(layer.params())
    return params


def mse_loss(pred: Tensor, target: Tensor):
    """Mean squared error over all elements and its gradient w.r.t. pred."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad


@dataclass
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


class Adam:
    """Adam optimizer over a fixed parameter list.

    Each step increments the shared step count t, then applies the
    bias-corrected update p -= lr * m_hat / (sqrt(v_hat) + eps).
    """

    def __init__(self, params: list[Param], config: AdamConfig | None = None):
        self.params = list(params)
        self.config = config or AdamConfig()
        self.t = 0

    def step(self, grads) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for p, g in zip(self.params, grads):
            g = np.asarray(g)
            if g.shape != p.value.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {p.value.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient in Adam step")
            p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * g
            p.v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * (g * g)
            m_hat = p.m / bc1
            v_hat = p.v / bc2
            p.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
