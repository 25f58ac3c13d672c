"""Training-pathology probes: dormant units, representation rank, curvature.

All probes are read-only over parameters. The Hessian trace is estimated
with Hutchinson's method on top of central finite-difference Hessian-vector
products, which keeps the core explicit-backprop-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError
from .linalg import rademacher, singular_values
from .networks import NetworkParams, forward_network, per_layer_grad_norms

__all__ = [
    "ProbeConfig",
    "ProbeBatch",
    "DiagnosticsReport",
    "dormant_fraction",
    "srank",
    "hvp_finite_diff",
    "hutchinson_trace",
    "run_probes",
]


@dataclass(frozen=True)
class ProbeConfig:
    dormant_threshold: float = 0.025
    srank_delta: float = 0.01
    hutchinson_samples: int = 100
    fd_epsilon: float = 1e-3  # relative, rescaled by (1+||theta||)/||v||
    probe_batch_size: int = 1024

    def __post_init__(self):
        if self.dormant_threshold < 0:
            raise InputError("dormant_threshold must be >= 0")
        if not 0 < self.srank_delta < 1:
            raise InputError("srank_delta must be in (0, 1)")
        if self.hutchinson_samples < 1:
            raise InputError("hutchinson_samples must be >= 1")


@dataclass
class ProbeBatch:
    """Frozen batch the probes run on; labels enable the accuracy field."""

    inputs: np.ndarray
    labels: np.ndarray | None = None


@dataclass
class DiagnosticsReport:
    step: int
    per_layer_grad_norms: list
    dormant_fraction: float
    srank: int
    srank_all_zero: bool
    hessian_trace: float
    hessian_trace_stderr: float
    probe_loss: float
    mean_q: float
    accuracy: float | None = None
    episode_return_mean: float | None = None


def _unit_scores(hidden: np.ndarray):
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[0] < 1:
        raise InputError("dormant_fraction needs a non-empty (batch, units) matrix")
    per_unit = np.abs(hidden).mean(axis=0)
    denom = per_unit.mean()
    if denom == 0.0:
        return None, hidden.shape[1]  # every unit dormant
    return per_unit / denom, hidden.shape[1]


def dormant_fraction(hidden: np.ndarray, threshold: float) -> float:
    """Fraction of units whose normalized mean |activation| is <= threshold."""
    scores, n_units = _unit_scores(hidden)
    if scores is None:
        return 1.0
    return float(np.count_nonzero(scores <= threshold)) / n_units


def srank(features: np.ndarray, delta: float) -> int:
    """Smallest k whose top-k singular values hold fraction 1-delta of the mass.

    An all-zero matrix returns 0 by convention (flagged upstream).
    """
    sv = singular_values(features)
    total = float(sv.sum())
    if total == 0.0:
        return 0
    cum = np.cumsum(sv) / total
    return int(np.searchsorted(cum, 1.0 - delta) + 1)


def _flatten(d: dict) -> np.ndarray:
    return np.concatenate([np.asarray(v).ravel() for v in d.values()])


def _unflatten(vec: np.ndarray, like: dict) -> dict:
    out = {}
    i = 0
    for name, arr in like.items():
        n = arr.size
        out[name] = vec[i : i + n].reshape(arr.shape)
        i += n
    return out


def hvp_finite_diff(grad_fn, tensors: dict, direction: dict, epsilon: float) -> dict:
    """Hessian-vector product (grad(t+eps*v) - grad(t-eps*v)) / (2*eps).

    grad_fn maps a tensor dict to a gradient bundle; eps is rescaled by
    (1 + ||theta||) / ||v||.
    """
    theta = _flatten(tensors)
    v = _flatten(direction)
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        return {name: np.zeros_like(arr) for name, arr in tensors.items()}
    eps = epsilon * (1.0 + float(np.linalg.norm(theta))) / vnorm
    g_up = _flatten(grad_fn(_unflatten(theta + eps * v, tensors)))
    g_dn = _flatten(grad_fn(_unflatten(theta - eps * v, tensors)))
    if not (np.all(np.isfinite(g_up)) and np.all(np.isfinite(g_dn))):
        raise NumericError("non-finite gradients during Hessian-vector product")
    return _unflatten((g_up - g_dn) / (2.0 * eps), tensors)


def hutchinson_trace(grad_fn, tensors: dict, n_samples: int, rng: np.random.Generator, epsilon: float = 1e-3):
    """Randomized trace estimate mean_v [v' H v] with Rademacher probes.

    Returns (estimate, standard error); stderr is 0.0 when n_samples == 1.
    """
    if n_samples < 1:
        raise InputError("hutchinson_trace needs n_samples >= 1")
    samples = np.empty(n_samples)
    for i in range(n_samples):
        v = {name: rademacher(arr.shape, rng) for name, arr in tensors.items()}
        hv = hvp_finite_diff(grad_fn, tensors, v, epsilon)
        samples[i] = float(np.dot(_flatten(v), _flatten(hv)))
    est = float(samples.mean())
    stderr = float(samples.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return est, stderr


def run_probes(
    params: NetworkParams,
    probe_batch: ProbeBatch,
    loss_fn,
    config: ProbeConfig,
    rng: np.random.Generator,
    step: int = 0,
) -> DiagnosticsReport:
    """One probe pass over the frozen batch.

    loss_fn(params) must return (loss, gradient bundle) on the probe batch;
    probes never mutate params or any optimizer state.
    """
    res = forward_network(params, probe_batch.inputs)
    dormant_units = 0
    total_units = 0
    for hidden in res.caches.hiddens:
        scores, n = _unit_scores(hidden)
        dormant_units += n if scores is None else int(np.count_nonzero(scores <= config.dormant_threshold))
        total_units += n
    rank = srank(res.penultimate, config.srank_delta)
    loss, bundle = loss_fn(params)
    norms = per_layer_grad_norms(bundle)

    def grad_of(tensors):
        return loss_fn(params.clone_with(tensors))[1]

    trace, stderr = hutchinson_trace(
        grad_of, params.tensors(), config.hutchinson_samples, rng, epsilon=config.fd_epsilon
    )
    accuracy = None
    if probe_batch.labels is not None:
        accuracy = float(np.mean(np.argmax(res.outputs, axis=1) == probe_batch.labels))
    return DiagnosticsReport(
        step=step,
        per_layer_grad_norms=norms,
        dormant_fraction=dormant_units / total_units,
        srank=rank,
        srank_all_zero=(rank == 0),
        hessian_trace=trace,
        hessian_trace_stderr=stderr,
        probe_loss=float(loss),
        mean_q=float(res.outputs.mean()),
        accuracy=accuracy,
    )
