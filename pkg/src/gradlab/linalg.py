"""Dense float64 linear algebra used by every other module.

Matrices are plain 2-D ``numpy.ndarray`` of float64 (row-major). Wrappers
here add the shape/validity checks the rest of the package relies on and
pin down the deterministic initializers.
"""

from __future__ import annotations

import re

import numpy as np
import scipy.linalg

from .errors import FactorizationError, NumericError, ShapeError

__all__ = [
    "as_matrix",
    "matmul",
    "transpose",
    "cholesky_solve_spd",
    "singular_values",
    "init_weights",
    "rademacher",
]

_SCHEMES = ("he", "xavier", "orthogonal")


def as_matrix(a) -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def cholesky_solve_spd(a: np.ndarray, b: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """Solve (a + damping*I) x = b for symmetric positive definite a.

    Residual norm is <= 1e-9 * ||b|| for well-conditioned damped systems;
    a non-SPD damped matrix raises FactorizationError naming the pivot.
    """
    a = as_matrix(a)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ShapeError(f"rhs rows {b.shape[0]} != matrix size {a.shape[0]}")
    if damping < 0:
        raise ShapeError("damping must be >= 0")
    m = a if damping == 0 else a + damping * np.eye(a.shape[0])
    try:
        chol = scipy.linalg.cholesky(m, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        hit = re.search(r"(\d+)-th leading minor", str(exc))
        pivot = int(hit.group(1)) if hit else None
        raise FactorizationError("matrix is not positive definite after damping", pivot=pivot) from exc
    y = scipy.linalg.solve_triangular(chol, b, lower=True, check_finite=False)
    return scipy.linalg.solve_triangular(chol.T, y, lower=False, check_finite=False)


def singular_values(a: np.ndarray) -> np.ndarray:
    """Singular values of `a`, non-negative and descending.

    Computed as the eigenvalues of the Gram matrix of the smaller side,
    so singular_values(M) and singular_values(M.T) agree exactly.
    """
    a = as_matrix(a)
    if not np.all(np.isfinite(a)):
        raise NumericError("singular_values requires finite entries")
    if a.shape[0] <= a.shape[1]:
        gram = a @ a.T
    else:
        gram = a.T @ a
    gram = 0.5 * (gram + gram.T)
    eigvals = np.linalg.eigvalsh(gram)
    sv = np.sqrt(np.clip(eigvals, 0.0, None))
    return np.sort(sv)[::-1]


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 2:
        out_dim, in_dim = shape
        return in_dim, out_dim
    if len(shape) == 4:
        out_ch, in_ch, kh, kw = shape
        return in_ch * kh * kw, out_ch * kh * kw
    raise ShapeError(f"weight init supports 2-D or 4-D shapes, got {shape}")


def init_weights(shape, scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Weight initializer.

    he: var 2/fan_in, xavier: var 2/(fan_in+fan_out), orthogonal: rows or
    columns orthonormal on the smaller dimension (2-D shapes only).
    """
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"all dims must be positive, got {shape}")
    if scheme not in _SCHEMES:
        from .errors import ConfigError

        raise ConfigError(f"unknown init scheme '{scheme}', expected one of {_SCHEMES}")
    if scheme == "orthogonal":
        if len(shape) != 2:
            raise ShapeError("orthogonal init requires a 2-D shape")
        rows, cols = shape
        g = rng.standard_normal((max(rows, cols), min(rows, cols)))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))  # sign-fix for a deterministic factor
        return np.ascontiguousarray(q if rows >= cols else q.T)
    fan_in, fan_out = _fans(shape)
    if scheme == "he":
        std = np.sqrt(2.0 / fan_in)
    else:
        std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.standard_normal(shape) * std


def rademacher(shape, rng: np.random.Generator) -> np.ndarray:
    """Array of +/-1 entries, equiprobable."""
    shape = tuple(int(s) for s in shape)
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
