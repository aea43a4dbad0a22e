"""
Minimal layer primitives with hand-written vector-Jacobian products.

Every layer acts on a batch: the leading axis of ``x`` is the sample axis.

    dense      x: (B, in)           -> (B, out)
    conv2d     x: (B, C, H, W)      -> (B, O, H, W)     'same' zero padding, stride 1
    maxpool2d  x: (B, C, H, W)      -> (B, C, H//k, W//k)
    dropout    any shape            -> same shape        inverted scaling 1/(1-p)
    flatten    x: (B, ...)          -> (B, prod(...))

Backward convention: given v = dL/dy, ``layer_vjp`` returns
dL/dx and dL/dparams, with parameter gradients summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

KINDS = ("dense", "conv2d", "maxpool2d", "dropout", "flatten")
ACTIVATIONS = ("relu", "sigmoid", "arctan", "identity")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    kernel: int = 1
    pool: int = 2
    activation: str = "identity"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1], got {self.dropout_rate}")
        if self.kernel < 1 or self.pool < 1:
            raise ConfigError("kernel and pool windows must be >= 1")
        if self.kind == "conv2d" and self.kernel % 2 == 0:
            raise ConfigError("'same' padding needs an odd kernel window")
        if self.kind in ("dense", "conv2d") and (self.in_features < 1 or self.out_features < 1):
            raise ConfigError(f"{self.kind} layer needs positive in/out widths")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def out_shape(self, in_shape: tuple) -> tuple:
        """Per-sample output shape for a per-sample input shape."""
        in_shape = tuple(in_shape)
        if self.kind == "dense":
            if in_shape != (self.in_features,):
                raise DimensionError(f"dense expects ({self.in_features},), got {in_shape}")
            return (self.out_features,)
        if self.kind == "conv2d":
            if len(in_shape) != 3 or in_shape[0] != self.in_features:
                raise DimensionError(f"conv2d expects ({self.in_features}, H, W), got {in_shape}")
            return (self.out_features,) + in_shape[1:]
        if self.kind == "maxpool2d":
            if len(in_shape) != 3:
                raise DimensionError(f"maxpool2d expects (C, H, W), got {in_shape}")
            c, h, w = in_shape
            if h < self.pool or w < self.pool:
                raise DimensionError(f"pool window {self.pool} larger than {in_shape}")
            return (c, h // self.pool, w // self.pool)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        return in_shape

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def dense(n_in, n_out, activation="identity") -> LayerSpec:
    return LayerSpec("dense", in_features=n_in, out_features=n_out, activation=activation)


def conv2d(c_in, c_out, kernel=3, activation="identity") -> LayerSpec:
    return LayerSpec("conv2d", in_features=c_in, out_features=c_out, kernel=kernel, activation=activation)


def maxpool2d(window=2) -> LayerSpec:
    return LayerSpec("maxpool2d", pool=window)


def dropout(rate) -> LayerSpec:
    return LayerSpec("dropout", dropout_rate=rate)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


@dataclass
class LayerParams:
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None


@dataclass
class ForwardCache:
    spec: LayerSpec
    x_shape: tuple
    x: np.ndarray | None = None
    pre: np.ndarray | None = None
    extra: Any = None


@dataclass
class VjpResult:
    grad_input: np.ndarray
    grad_params: LayerParams = field(default_factory=LayerParams)


def param_shapes(spec: LayerSpec) -> dict[str, tuple]:
    if spec.kind == "dense":
        return {"weight": (spec.in_features, spec.out_features), "bias": (spec.out_features,)}
    if spec.kind == "conv2d":
        k = spec.kernel
        return {"weight": (spec.out_features, spec.in_features, k, k), "bias": (spec.out_features,)}
    return {}


def init_params(spec: LayerSpec, rng: np.random.Generator, dtype=np.float64) -> LayerParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    shapes = param_shapes(spec)
    if not shapes:
        return LayerParams()
    fan_in = spec.in_features * (spec.kernel**2 if spec.kind == "conv2d" else 1)
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=shapes["weight"]).astype(dtype)
    b = rng.uniform(-bound, bound, size=shapes["bias"]).astype(dtype)
    return LayerParams(w, b)


# activations ---------------------------------------------------------------

def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if name == "arctan":
        return np.arctan(z)
    raise ConfigError(f"unknown activation {name!r}")


def activation_vjp(name: str, z: np.ndarray, v: np.ndarray) -> np.ndarray:
    if name == "identity":
        return v
    if name == "relu":
        # subgradient 0 at the kink
        return v * (z > 0)
    if name == "sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return v * s * (1.0 - s)
    if name == "arctan":
        return v / (1.0 + z * z)
    raise ConfigError(f"unknown activation {name!r}")


# per-kind kernels ----------------------------------------------------------

def _conv_same(xp, w, h, wd):
    # xp: padded (B, C, H+k-1, W+k-1); w: (O, C, k, k)
    k = w.shape[-1]
    out = None
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + h, j:j + wd]
            term = np.tensordot(patch, w[:, :, i, j], axes=([1], [1]))  # (B, H, W, O)
            out = term if out is None else out + term
    return np.moveaxis(out, -1, 1)


def _maxpool_forward(x, k):
    b, c, h, w = x.shape
    ho, wo = h // k, w // k
    xt = x[:, :, :ho * k, :wo * k].reshape(b, c, ho, k, wo, k)
    blocks = xt.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _maxpool_vjp(v, idx, x_shape, k):
    b, c, h, w = x_shape
    ho, wo = idx.shape[2], idx.shape[3]
    blocks = np.zeros((b, c, ho, wo, k * k), dtype=v.dtype)
    np.put_along_axis(blocks, idx[..., None], v[..., None], axis=-1)
    g = blocks.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * k, wo * k)
    if (ho * k, wo * k) == (h, w):
        return g
    out = np.zeros(x_shape, dtype=v.dtype)
    out[:, :, :ho * k, :wo * k] = g
    return out


def _check_input(spec: LayerSpec, params: LayerParams, x: np.ndarray):
    if x.ndim < 2:
        raise DimensionError(f"expected a batched input (B, ...), got shape {x.shape}")
    spec.out_shape(x.shape[1:])
    if spec.has_params:
        shapes = param_shapes(spec)
        if params is None or params.weight is None or params.bias is None:
            raise DimensionError(f"{spec.kind} layer is missing parameters")
        if params.weight.shape != shapes["weight"] or params.bias.shape != shapes["bias"]:
            raise DimensionError(
                f"{spec.kind} params {params.weight.shape}/{params.bias.shape} "
                f"do not match {shapes['weight']}/{shapes['bias']}"
            )
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite input to {spec.kind} layer")


def layer_forward(spec: LayerSpec, params: LayerParams | None, x: np.ndarray,
                  rng: np.random.Generator | None = None, *, dropout_active: bool = True):
    """Evaluate one layer on a batch; returns ``(y, cache)``.

    ``rng`` is consumed only by an active dropout layer with rate > 0.
    """
    x = np.asarray(x)
    _check_input(spec, params, x)
    cache = ForwardCache(spec, x.shape)
    kind = spec.kind
    if kind == "dense":
        z = x @ params.weight + params.bias
        cache.x, cache.pre = x, z
        return activate(spec.activation, z), cache
    if kind == "conv2d":
        r = spec.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
        z = _conv_same(xp, params.weight, x.shape[2], x.shape[3]) + params.bias[None, :, None, None]
        cache.x, cache.pre = xp, z
        return activate(spec.activation, z), cache
    if kind == "maxpool2d":
        y, idx = _maxpool_forward(x, spec.pool)
        cache.extra = idx
        return y, cache
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), cache
    # dropout
    p = spec.dropout_rate
    if not dropout_active or p == 0.0:
        cache.extra = None
        return x, cache
    if rng is None:
        raise ContractError("active dropout needs an rng")
    keep = rng.random(x.shape) >= p
    scale = 0.0 if p >= 1.0 else 1.0 / (1.0 - p)
    mask = keep.astype(x.dtype) * scale
    cache.extra = mask
    return x * mask, cache


def layer_vjp(spec: LayerSpec, params: LayerParams | None, cache: ForwardCache, v: np.ndarray) -> VjpResult:
    if cache.spec != spec:
        raise ContractError(f"cache was produced by {cache.spec.kind}, not {spec.kind}")
    kind = spec.kind
    if kind == "dense":
        dz = activation_vjp(spec.activation, cache.pre, v)
        if dz.shape != cache.pre.shape:
            raise ContractError(f"cotangent shape {v.shape} != output shape {cache.pre.shape}")
        return VjpResult(dz @ params.weight.T, LayerParams(cache.x.T @ dz, dz.sum(axis=0)))
    if kind == "conv2d":
        dz = activation_vjp(spec.activation, cache.pre, v)
        if dz.shape != cache.pre.shape:
            raise ContractError(f"cotangent shape {v.shape} != output shape {cache.pre.shape}")
        w = params.weight
        k = spec.kernel
        _, _, h, wd = cache.x_shape
        xp = cache.x
        gxp = np.zeros_like(xp, dtype=dz.dtype)
        gw = np.empty_like(w)
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i:i + h, j:j + wd]
                gw[:, :, i, j] = np.tensordot(dz, patch, axes=([0, 2, 3], [0, 2, 3]))
                gxp[:, :, i:i + h, j:j + wd] += np.moveaxis(
                    np.tensordot(dz, w[:, :, i, j], axes=([1], [0])), -1, 1)
        r = k // 2
        gx = gxp[:, :, r:r + h, r:r + wd]
        return VjpResult(gx, LayerParams(gw, dz.sum(axis=(0, 2, 3))))
    if kind == "maxpool2d":
        if v.shape != cache.extra.shape:
            raise ContractError(f"cotangent shape {v.shape} != pooled shape {cache.extra.shape}")
        return VjpResult(_maxpool_vjp(v, cache.extra, cache.x_shape, spec.pool))
    if kind == "flatten":
        return VjpResult(v.reshape(cache.x_shape))
    if cache.extra is None:
        return VjpResult(v)
    return VjpResult(v * cache.extra)


def stack_forward(stack, x, rng=None, *, dropout_active=True):
    """Compose ``[(spec, params), ...]`` left to right; returns ``(y, caches)``."""
    if not stack:
        raise ContractError("empty layer stack")
    caches = []
    y = x
    for spec, params in stack:
        y, cache = layer_forward(spec, params, y, rng, dropout_active=dropout_active)
        caches.append(cache)
    return y, caches


def stack_vjp(stack, caches, v):
    """Reverse-order adjoint of ``stack_forward``; returns ``(grad_input, [LayerParams, ...])``."""
    if not stack:
        raise ContractError("empty layer stack")
    if len(caches) != len(stack):
        raise ContractError(f"{len(caches)} caches for a {len(stack)}-layer stack")
    grads = [None] * len(stack)
    g = v
    for i in range(len(stack) - 1, -1, -1):
        spec, params = stack[i]
        res = layer_vjp(spec, params, caches[i], g)
        grads[i] = res.grad_params
        g = res.grad_input
    return g, grads


def stack_out_shape(specs, in_shape) -> tuple:
    shape = tuple(in_shape)
    for spec in specs:
        shape = spec.out_shape(shape)
    return shape
