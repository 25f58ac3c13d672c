"""Checkpoint container: network spec + tensors (+ optimizer state) in one npz.

Round-trips are bit-exact: float64 arrays are stored raw, structure in a
JSON meta record. Version field guards future layout changes.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .errors import FormatError
from .networks import ArchitectureSpec, NetworkParams, build_network
from .optim import FirstOrderState, KronLayerFactors, KronState
from .rng import make_rng

__all__ = ["save_checkpoint", "load_checkpoint"]

_VERSION = 1


def _optimizer_meta(state) -> dict | None:
    if state is None:
        return None
    if isinstance(state, KronState):
        return {
            "kind": "kron",
            "learning_rate": state.learning_rate,
            "ema_decay": state.ema_decay,
            "damping": state.damping,
            "refresh_every": state.refresh_every,
            "update_cap": state.update_cap if np.isfinite(state.update_cap) else "inf",
            "t": state.t,
            "layers": {
                lid: {"last_refresh": fac.last_refresh, "seen": fac.seen, "has_inv": fac.a_inv is not None}
                for lid, fac in state.layers.items()
            },
            "fallback": _optimizer_meta(state.fallback),
        }
    return {
        "kind": state.kind,
        "learning_rate": state.learning_rate,
        "momentum": state.momentum,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "t": state.t,
    }


def _collect_optimizer_arrays(state, prefix: str, arrays: dict):
    if state is None:
        return
    if isinstance(state, KronState):
        for lid, fac in state.layers.items():
            arrays[f"{prefix}kron:{lid}:a_ema"] = fac.a_ema
            arrays[f"{prefix}kron:{lid}:g_ema"] = fac.g_ema
            if fac.a_inv is not None:
                arrays[f"{prefix}kron:{lid}:a_inv"] = fac.a_inv
                arrays[f"{prefix}kron:{lid}:g_inv"] = fac.g_inv
        _collect_optimizer_arrays(state.fallback, prefix + "fb:", arrays)
        return
    for name, arr in state.m.items():
        arrays[f"{prefix}m:{name}"] = arr
    for name, arr in state.v.items():
        arrays[f"{prefix}v:{name}"] = arr


def save_checkpoint(path: str, params: NetworkParams, optimizer_state=None) -> None:
    meta = {
        "version": _VERSION,
        "arch": asdict(params.spec),
        "in_shape": list(params.in_shape),
        "out_dim": params.out_dim,
        "optimizer": _optimizer_meta(optimizer_state),
    }
    arrays = {f"param:{name}": tensor for name, tensor in params.tensors().items()}
    _collect_optimizer_arrays(optimizer_state, "opt:", arrays)
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def _restore_first_order(meta: dict, arrays: dict, prefix: str) -> FirstOrderState:
    state = FirstOrderState(
        kind=meta["kind"],
        learning_rate=meta["learning_rate"],
        momentum=meta["momentum"],
        beta1=meta["beta1"],
        beta2=meta["beta2"],
        eps=meta["eps"],
        t=meta["t"],
    )
    for key, arr in arrays.items():
        if key.startswith(f"{prefix}m:"):
            state.m[key[len(prefix) + 2 :]] = arr
        elif key.startswith(f"{prefix}v:"):
            state.v[key[len(prefix) + 2 :]] = arr
    return state


def _restore_optimizer(meta: dict | None, arrays: dict):
    if meta is None:
        return None
    if meta["kind"] != "kron":
        return _restore_first_order(meta, arrays, "opt:")
    cap = meta["update_cap"]
    state = KronState(
        learning_rate=meta["learning_rate"],
        ema_decay=meta["ema_decay"],
        damping=meta["damping"],
        refresh_every=meta["refresh_every"],
        update_cap=float("inf") if cap == "inf" else cap,
        t=meta["t"],
    )
    for lid, info in meta["layers"].items():
        fac = KronLayerFactors(
            a_ema=arrays[f"opt:kron:{lid}:a_ema"],
            g_ema=arrays[f"opt:kron:{lid}:g_ema"],
            last_refresh=info["last_refresh"],
            seen=info["seen"],
        )
        if info["has_inv"]:
            fac.a_inv = arrays[f"opt:kron:{lid}:a_inv"]
            fac.g_inv = arrays[f"opt:kron:{lid}:g_inv"]
        state.layers[lid] = fac
    state.fallback = _restore_first_order(meta["fallback"], arrays, "opt:fb:")
    return state


def load_checkpoint(path: str):
    """Returns (params, optimizer_state or None); tensors are bit-identical."""
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    if "meta" not in arrays:
        raise FormatError("not a gradlab checkpoint: missing meta record")
    meta = json.loads(bytes(arrays.pop("meta")).decode())
    if meta.get("version") != _VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
    spec = ArchitectureSpec(
        **{**meta["arch"], "conv_channels": tuple(meta["arch"]["conv_channels"])}
    )
    in_shape = meta["in_shape"]
    skeleton = build_network(spec, in_shape if len(in_shape) > 1 else in_shape[0], meta["out_dim"], make_rng(0))
    tensors = {k[len("param:") :]: v for k, v in arrays.items() if k.startswith("param:")}
    params = skeleton.clone_with(tensors)
    return params, _restore_optimizer(meta["optimizer"], arrays)
