"""Shared oracle utilities for the test suite."""

import numpy as np


def flatten_bundle(bundle):
    """Concatenate a name->array dict into one vector (insertion order)."""
    return np.concatenate([np.asarray(v).ravel() for v in bundle.values()])


def unflatten_like(vec, bundle):
    out = {}
    i = 0
    for name, arr in bundle.items():
        n = np.asarray(arr).size
        out[name] = np.asarray(vec[i : i + n]).reshape(np.shape(arr))
        i += n
    return out


def directional_fd(loss_fn, tensors, direction, eps_scale=1e-6):
    """Central finite difference of loss_fn along `direction` in tensor space.

    tensors/direction are name->array dicts; eps is scaled by (1+||theta||)/||v||.
    """
    theta = flatten_bundle(tensors)
    v = flatten_bundle(direction)
    vnorm = float(np.linalg.norm(v))
    eps = eps_scale * (1.0 + float(np.linalg.norm(theta))) / vnorm
    up = unflatten_like(theta + eps * v, tensors)
    dn = unflatten_like(theta - eps * v, tensors)
    return (loss_fn(up) - loss_fn(dn)) / (2.0 * eps)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)
