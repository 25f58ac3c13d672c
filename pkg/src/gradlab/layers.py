"""Layer primitives with explicit forward/backward passes.

Every forward returns a cache holding exactly what its backward needs, so
per-layer gradients stay inspectable (no autodiff tape). Gradient bundles
are plain dicts mapping tensor name -> ndarray with parameter shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, StateError

__all__ = [
    "DenseLayer",
    "ConvLayer",
    "LayerNormParams",
    "DenseCache",
    "ActivationCache",
    "LayerNormCache",
    "ConvCache",
    "dense_forward",
    "dense_backward",
    "activation_forward",
    "activation_backward",
    "layernorm_forward",
    "layernorm_backward",
    "conv_forward",
    "conv_backward",
    "global_grad_norm",
    "clip_global_grad_norm",
]


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class ConvLayer:
    kernels: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1


@dataclass
class LayerNormParams:
    gain: np.ndarray  # (features,)
    shift: np.ndarray  # (features,)
    epsilon: float = 1e-5


@dataclass
class DenseCache:
    x: np.ndarray  # layer input, (batch, in)
    d_preact: np.ndarray | None = None  # filled by dense_backward, (batch, out)


@dataclass
class ActivationCache:
    kind: str
    x: np.ndarray
    y: np.ndarray


@dataclass
class LayerNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray  # (batch, 1)


@dataclass
class ConvCache:
    x_shape: tuple
    cols: np.ndarray  # (batch, oh*ow, in_ch*kh*kw)
    out_hw: tuple


def dense_forward(layer: DenseLayer, x: np.ndarray) -> tuple[np.ndarray, DenseCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"dense input shape {x.shape} does not match in_dim {layer.in_dim}")
    y = x @ layer.weight.T + layer.bias
    return y, DenseCache(x=x)


def dense_backward(layer: DenseLayer, cache: DenseCache, dy: np.ndarray):
    """Returns (dx, dW, db); also records dy on the cache for curvature stats."""
    if cache is None or cache.x is None:
        raise StateError("dense_backward called without a forward cache")
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != (cache.x.shape[0], layer.out_dim):
        raise ShapeError(f"dy shape {dy.shape} does not match forward output")
    cache.d_preact = dy
    dw = dy.T @ cache.x
    db = dy.sum(axis=0)
    dx = dy @ layer.weight
    return dx, dw, db


def activation_forward(kind: str, x: np.ndarray) -> tuple[np.ndarray, ActivationCache]:
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        y = np.maximum(x, 0.0)
    elif kind == "tanh":
        y = np.tanh(x)
    else:
        raise ConfigError(f"unknown activation '{kind}', expected relu or tanh")
    return y, ActivationCache(kind=kind, x=x, y=y)


def activation_backward(kind: str, cache: ActivationCache, dy: np.ndarray) -> np.ndarray:
    if cache is None or cache.kind != kind:
        raise StateError(f"activation cache mismatch: expected '{kind}'")
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.x.shape:
        raise ShapeError(f"dy shape {dy.shape} does not match activation input {cache.x.shape}")
    if kind == "relu":
        # subgradient at 0 is 0: gradient is blocked wherever the unit is inactive
        return dy * (cache.x > 0.0)
    return dy * (1.0 - cache.y**2)


def layernorm_forward(params: LayerNormParams, x: np.ndarray) -> tuple[np.ndarray, LayerNormCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.gain.shape[0]:
        raise ShapeError(f"layernorm input shape {x.shape} does not match feature dim {params.gain.shape[0]}")
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    x_hat = (x - mu) * inv_std
    y = x_hat * params.gain + params.shift
    return y, LayerNormCache(x_hat=x_hat, inv_std=inv_std)


def layernorm_backward(params: LayerNormParams, cache: LayerNormCache, dy: np.ndarray):
    """Standard per-row LN gradient:

    dx = inv_std * (u - mean(u) - x_hat * mean(u * x_hat)),  u = dy * gain
    """
    if cache is None:
        raise StateError("layernorm_backward called without a forward cache")
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.x_hat.shape:
        raise ShapeError(f"dy shape {dy.shape} does not match layernorm input {cache.x_hat.shape}")
    u = dy * params.gain
    mean_u = u.mean(axis=1, keepdims=True)
    mean_ux = (u * cache.x_hat).mean(axis=1, keepdims=True)
    dx = cache.inv_std * (u - mean_u - cache.x_hat * mean_ux)
    dgain = (dy * cache.x_hat).sum(axis=0)
    dshift = dy.sum(axis=0)
    return dx, dgain, dshift


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, tuple[int, int]]:
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((b, oh * ow, c * kh * kw), dtype=np.float64)
    idx = 0
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                patch = x[:, ci, i : i + stride * oh : stride, j : j + stride * ow : stride]
                cols[:, :, idx] = patch.reshape(b, oh * ow)
                idx += 1
    return cols, (oh, ow)


def _col2im(dcols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    b, c, h, w = x_shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    dx = np.zeros(x_shape, dtype=np.float64)
    idx = 0
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                dx[:, ci, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, idx].reshape(
                    b, oh, ow
                )
                idx += 1
    return dx


def conv_forward(layer: ConvLayer, x: np.ndarray) -> tuple[np.ndarray, ConvCache]:
    """Cross-correlation with valid padding via im2col."""
    x = np.asarray(x, dtype=np.float64)
    out_ch, in_ch, kh, kw = layer.kernels.shape
    if x.ndim != 4 or x.shape[1] != in_ch:
        raise ShapeError(f"conv input shape {x.shape} does not match in_ch {in_ch}")
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeError(f"conv input spatial dims {x.shape[2:]} smaller than kernel ({kh},{kw})")
    cols, (oh, ow) = _im2col(x, kh, kw, layer.stride)
    kflat = layer.kernels.reshape(out_ch, -1)
    y = cols @ kflat.T + layer.bias  # (b, oh*ow, out_ch)
    y = np.ascontiguousarray(y.transpose(0, 2, 1).reshape(x.shape[0], out_ch, oh, ow))
    return y, ConvCache(x_shape=x.shape, cols=cols, out_hw=(oh, ow))


def conv_backward(layer: ConvLayer, cache: ConvCache, dy: np.ndarray):
    if cache is None:
        raise StateError("conv_backward called without a forward cache")
    dy = np.asarray(dy, dtype=np.float64)
    out_ch, in_ch, kh, kw = layer.kernels.shape
    b = cache.x_shape[0]
    oh, ow = cache.out_hw
    if dy.shape != (b, out_ch, oh, ow):
        raise ShapeError(f"dy shape {dy.shape} does not match conv output ({b},{out_ch},{oh},{ow})")
    dy_flat = dy.reshape(b, out_ch, oh * ow).transpose(0, 2, 1)  # (b, oh*ow, out_ch)
    kflat = layer.kernels.reshape(out_ch, -1)
    dk = np.einsum("bpo,bpk->ok", dy_flat, cache.cols).reshape(layer.kernels.shape)
    db = dy_flat.sum(axis=(0, 1))
    dcols = dy_flat @ kflat
    dx = _col2im(dcols, cache.x_shape, kh, kw, layer.stride)
    return dx, dk, db


def global_grad_norm(bundle: dict[str, np.ndarray]) -> float:
    sq = 0.0
    for g in bundle.values():
        sq += float(np.sum(g * g))
    return float(np.sqrt(sq))


def clip_global_grad_norm(bundle: dict[str, np.ndarray], max_norm: float):
    """Scale the whole bundle so its global L2 norm is at most max_norm.

    Returns (bundle, pre_clip_norm); the input dict is not modified.
    """
    if max_norm <= 0:
        raise ShapeError("max_norm must be > 0")
    norm = global_grad_norm(bundle)
    if norm <= max_norm or norm == 0.0:
        return dict(bundle), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in bundle.items()}, norm
