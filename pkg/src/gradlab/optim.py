"""Optimizers: SGD, Adam, RAdam, and the Kronecker-factored "kron".

kron keeps per-dense-layer covariance EMAs A (homogeneous-augmented layer
inputs) and G (loss gradients at the dense pre-activation) and
preconditions the bias-augmented weight gradient as

    delta = (G + lG*I)^-1 @ dW_aug @ (A + lA*I)^-1

with factored damping lA = pi*sqrt(damping), lG = sqrt(damping)/pi,
pi = sqrt((tr A / dim A) / (tr G / dim G)). Tensors outside dense blocks
(conv kernels, LayerNorm gains/shifts) fall back to an embedded Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .networks import NetworkCaches, NetworkParams

__all__ = [
    "FirstOrderState",
    "KronLayerFactors",
    "KronState",
    "make_optimizer_state",
    "sgd_step",
    "adam_step",
    "radam_step",
    "kron_accumulate",
    "kron_refresh_inverses",
    "kron_precondition",
    "kron_step",
    "optimizer_step",
]

OPTIMIZER_KINDS = ("sgd", "adam", "radam", "kron")


@dataclass
class FirstOrderState:
    kind: str  # sgd | adam | radam
    learning_rate: float
    momentum: float = 0.0  # sgd only
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def moment(self, store: dict, name: str, like: np.ndarray) -> np.ndarray:
        if name not in store:
            store[name] = np.zeros_like(like)
        return store[name]


@dataclass
class KronLayerFactors:
    a_ema: np.ndarray  # (in+1, in+1)
    g_ema: np.ndarray  # (out, out)
    a_inv: np.ndarray | None = None
    g_inv: np.ndarray | None = None
    last_refresh: int = -1
    seen: int = 0


@dataclass
class KronState:
    learning_rate: float
    ema_decay: float = 0.95
    damping: float = 1e-3
    refresh_every: int = 10
    update_cap: float = 10.0  # kappa; inf disables the per-layer norm cap
    t: int = 0
    layers: dict = field(default_factory=dict)  # layer_id -> KronLayerFactors
    fallback: FirstOrderState | None = None

    def factors(self, layer_id: str, in_dim: int, out_dim: int) -> KronLayerFactors:
        if layer_id not in self.layers:
            self.layers[layer_id] = KronLayerFactors(
                a_ema=np.zeros((in_dim + 1, in_dim + 1)), g_ema=np.zeros((out_dim, out_dim))
            )
        return self.layers[layer_id]


def make_optimizer_state(kind: str, learning_rate: float, **kwargs) -> FirstOrderState | KronState:
    if kind not in OPTIMIZER_KINDS:
        raise ConfigError(f"unknown optimizer '{kind}', expected one of {OPTIMIZER_KINDS}")
    if kind == "kron":
        state = KronState(learning_rate=learning_rate, **kwargs)
        state.fallback = FirstOrderState(kind="adam", learning_rate=learning_rate)
        return state
    return FirstOrderState(kind=kind, learning_rate=learning_rate, **kwargs)


def _first_order_delta(state: FirstOrderState, name: str, g: np.ndarray) -> np.ndarray:
    """Update direction for one tensor; state.t must already be incremented."""
    if state.kind == "sgd":
        mu = state.moment(state.m, name, g)
        mu *= state.momentum
        mu += g
        return state.learning_rate * mu
    m = state.moment(state.m, name, g)
    v = state.moment(state.v, name, g)
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * g * g
    t = state.t
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    if state.kind == "adam":
        return state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    # radam: rectify the adaptive step only once variance is tractable
    rho_inf = 2.0 / (1.0 - state.beta2) - 1.0
    rho_t = rho_inf - 2.0 * t * state.beta2**t / (1.0 - state.beta2**t)
    if rho_t > 4.0:
        r_t = math.sqrt(
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
        )
        return state.learning_rate * r_t * m_hat / (np.sqrt(v_hat) + state.eps)
    return state.learning_rate * m_hat


def _apply_first_order(params: NetworkParams, bundle: dict, state: FirstOrderState, names=None) -> dict:
    tensors = params.tensors()
    names = list(bundle.keys()) if names is None else names
    new = {}
    for name in names:
        g = bundle[name]
        if g.shape != tensors[name].shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter '{name}' {tensors[name].shape}")
        new[name] = tensors[name] - _first_order_delta(state, name, g)
    return new


def sgd_step(params: NetworkParams, bundle: dict, state: FirstOrderState) -> NetworkParams:
    state.t += 1
    return params.clone_with(_apply_first_order(params, bundle, state))


def adam_step(params: NetworkParams, bundle: dict, state: FirstOrderState) -> NetworkParams:
    state.t += 1
    return params.clone_with(_apply_first_order(params, bundle, state))


def radam_step(params: NetworkParams, bundle: dict, state: FirstOrderState) -> NetworkParams:
    state.t += 1
    return params.clone_with(_apply_first_order(params, bundle, state))


def _augment(a_batch: np.ndarray) -> np.ndarray:
    ones = np.ones((a_batch.shape[0], 1))
    return np.concatenate([a_batch, ones], axis=1)


def kron_accumulate(state: KronState, layer_id: str, a_batch: np.ndarray, g_batch: np.ndarray) -> None:
    """Fold one minibatch of layer inputs / pre-activation gradients into the EMAs.

    a_batch is augmented with a constant-1 column here, so factors cover the
    bias row as well.
    """
    a_batch = np.asarray(a_batch, dtype=np.float64)
    g_batch = np.asarray(g_batch, dtype=np.float64)
    if a_batch.shape[0] != g_batch.shape[0]:
        raise ShapeError(f"a/g batch sizes differ: {a_batch.shape[0]} vs {g_batch.shape[0]}")
    b = a_batch.shape[0]
    fac = state.factors(layer_id, a_batch.shape[1], g_batch.shape[1])
    a_aug = _augment(a_batch)
    if a_aug.shape[1] != fac.a_ema.shape[0] or g_batch.shape[1] != fac.g_ema.shape[0]:
        raise ShapeError(f"factor shapes for '{layer_id}' do not match batch dims")
    rho = state.ema_decay
    fac.a_ema *= rho
    fac.a_ema += (1.0 - rho) * (a_aug.T @ a_aug) / b
    fac.g_ema *= rho
    fac.g_ema += (1.0 - rho) * (g_batch.T @ g_batch) / b
    fac.seen += 1


def _damped_inverse(m: np.ndarray, lam: float) -> np.ndarray:
    from .linalg import cholesky_solve_spd

    return cholesky_solve_spd(m, np.eye(m.shape[0]), damping=lam)


def kron_refresh_inverses(state: KronState, layer_id: str) -> None:
    fac = state.layers.get(layer_id)
    if fac is None or fac.seen == 0:
        raise StateError(f"no accumulated factors for layer '{layer_id}'")
    tr_a = float(np.trace(fac.a_ema)) / fac.a_ema.shape[0]
    tr_g = float(np.trace(fac.g_ema)) / fac.g_ema.shape[0]
    if tr_g <= 0.0 or tr_a <= 0.0:
        pi = 1.0
    else:
        pi = math.sqrt(tr_a / tr_g)
    sqrt_damp = math.sqrt(state.damping)
    fac.a_inv = _damped_inverse(fac.a_ema, pi * sqrt_damp)
    fac.g_inv = _damped_inverse(fac.g_ema, sqrt_damp / pi if pi > 0 else sqrt_damp)
    fac.last_refresh = state.t


def kron_precondition(state: KronState, layer_id: str, dw_augmented: np.ndarray) -> np.ndarray:
    """G_inv @ dW_aug @ A_inv for the (out, in+1) bias-augmented gradient."""
    fac = state.layers.get(layer_id)
    if fac is None or fac.a_inv is None or fac.g_inv is None:
        raise StateError(f"inverses not refreshed for layer '{layer_id}'")
    dw_augmented = np.asarray(dw_augmented, dtype=np.float64)
    if dw_augmented.shape != (fac.g_ema.shape[0], fac.a_ema.shape[0]):
        raise ShapeError(
            f"augmented gradient shape {dw_augmented.shape} does not match factors "
            f"({fac.g_ema.shape[0]}, {fac.a_ema.shape[0]})"
        )
    return fac.g_inv @ dw_augmented @ fac.a_inv


def kron_step(
    params: NetworkParams,
    bundle: dict,
    caches: NetworkCaches,
    state: KronState,
) -> NetworkParams:
    """One preconditioned update.

    Dense blocks get the Kronecker-preconditioned direction (with the
    optional per-layer cap ||delta|| <= kappa * ||dW_aug||); everything else
    goes through the embedded Adam fallback.
    """
    state.t += 1
    tensors = params.tensors()
    new: dict[str, np.ndarray] = {}
    dense_names = set()
    for layer_id, layer in params.dense_blocks():
        cache = caches.dense_cache(layer_id)
        if cache.d_preact is None:
            raise StateError(f"no pre-activation gradient recorded for '{layer_id}'; run backward first")
        # cached rows are gradients of the minibatch-mean loss; G statistics use
        # per-sample gradients, so undo the 1/B scale before accumulating
        kron_accumulate(state, layer_id, cache.x, cache.d_preact * cache.x.shape[0])
        fac = state.layers[layer_id]
        if fac.a_inv is None or state.t - fac.last_refresh >= state.refresh_every:
            kron_refresh_inverses(state, layer_id)
        w_name, b_name = f"{layer_id}.weight", f"{layer_id}.bias"
        dw_aug = np.concatenate([bundle[w_name], bundle[b_name][:, None]], axis=1)
        delta = kron_precondition(state, layer_id, dw_aug)
        if np.isfinite(state.update_cap):
            dnorm = float(np.sqrt(np.sum(delta * delta)))
            gnorm = float(np.sqrt(np.sum(dw_aug * dw_aug)))
            cap = state.update_cap * gnorm
            if dnorm > cap and dnorm > 0.0:
                delta = delta * (cap / dnorm)
        new[w_name] = tensors[w_name] - state.learning_rate * delta[:, :-1]
        new[b_name] = tensors[b_name] - state.learning_rate * delta[:, -1]
        dense_names.update((w_name, b_name))
    rest = [name for name in bundle if name not in dense_names]
    if rest:
        state.fallback.t += 1
        new.update(_apply_first_order(params, bundle, state.fallback, names=rest))
    return params.clone_with(new)


def optimizer_step(params: NetworkParams, bundle: dict, caches: NetworkCaches | None, state) -> NetworkParams:
    """Dispatch on the state type; kron needs the forward/backward caches."""
    if isinstance(state, KronState):
        if caches is None:
            raise StateError("kron optimizer requires forward/backward caches")
        return kron_step(params, bundle, caches, state)
    return {"sgd": sgd_step, "adam": adam_step, "radam": radam_step}[state.kind](params, bundle, state)
