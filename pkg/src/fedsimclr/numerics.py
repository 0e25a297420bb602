"""Dense float64 helpers, seeded random streams and a finite-difference oracle.

Every numeric container in the package is a 2-D ``float64`` numpy array with
samples stored as rows.
"""
from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

DEFAULT_EPS = 1e-12


class ConfigurationError(ValueError):
    """Raised for invalid shapes, out-of-range ids or inconsistent settings."""


class OracleError(RuntimeError):
    """Raised when a verification oracle cannot produce a trustworthy value."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ConfigurationError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("matmul produced non-finite values")
    return out


def row_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def row_l2_normalize(m, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Divide every row by ``max(||row||, eps)``."""
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    m = as_matrix(m)
    return m / np.maximum(row_norms(m), eps)[:, None]


def row_l2_normalize_backward(m: np.ndarray, grad_out: np.ndarray,
                              eps: float = DEFAULT_EPS) -> np.ndarray:
    """Pull ``grad_out`` (w.r.t. the normalized rows) back to the raw rows."""
    n = row_norms(m)
    scale = np.maximum(n, eps)
    u = m / scale[:, None]
    radial = np.einsum("ij,ij->i", u, grad_out)
    big = n > eps
    g = grad_out / scale[:, None]
    g[big] -= u[big] * (radial[big] / scale[big])[:, None]
    return g


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *tags)``.

    String tags are hashed with CRC32 so the mapping is stable across
    platforms and Python processes (unlike ``hash``).
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            words.append(zlib.crc32(t.encode("utf-8")))
        else:
            words.append(int(t) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central differences ``(f(x+h e_i) - f(x-h e_i)) / 2h`` for every coordinate.

    ``x`` may have any shape; the result has the same shape. ``f`` receives a
    perturbed copy, never ``x`` itself.
    """
    if h <= 0:
        raise ConfigurationError("h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x.copy()))
        flat[i] = orig - h
        fm = float(f(x.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    """Max-subtracted log-sum-exp along ``axis`` (kept dims dropped)."""
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def log_softmax(a: np.ndarray, axis: int = 1) -> np.ndarray:
    return a - np.expand_dims(logsumexp(a, axis), axis)
