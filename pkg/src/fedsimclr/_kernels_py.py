"""Pure-numpy implementations of the hot kernels (fallback backend)."""
from __future__ import annotations

import math

import numpy as np

from .numerics import logsumexp, row_l2_normalize, row_l2_normalize_backward


def cosine_infonce(z1: np.ndarray, z2: np.ndarray, tau: float, eps: float):
    """InfoNCE loss with a cosine/tau critic and its gradients w.r.t. z1, z2.

    Column k of the score matrix holds f(z1_j, z2_k) for all j; the loss is
    the negated bound ``-(1/K) sum_k [S_kk - log((1/K) sum_j exp S_jk)]``.
    """
    k = z1.shape[0]
    u = row_l2_normalize(z1, eps)
    v = row_l2_normalize(z2, eps)
    s = (u @ v.T) / tau
    lse = logsumexp(s, axis=0)
    loss = -float(np.mean(np.diag(s) - lse + math.log(k)))
    p = np.exp(s - lse[None, :])
    g = p / k
    g[np.diag_indices(k)] -= 1.0 / k
    du = (g @ v) / tau
    dv = (g.T @ u) / tau
    return (loss,
            row_l2_normalize_backward(z1, du, eps),
            row_l2_normalize_backward(z2, dv, eps))


def infonce_table_terms(critic: np.ndarray, s: np.ndarray, i1: np.ndarray,
                        i2: np.ndarray) -> np.ndarray:
    """Per-sample InfoNCE bound values for tabulated critics.

    ``critic[s, a, b]`` scores the pair (z1=a, z2=b) for client s; ``i1`` and
    ``i2`` are ``(n, K)`` index arrays of K positive pairs per sample.
    """
    k = i1.shape[1]
    c = critic[s[:, None, None], i1[:, :, None], i2[:, None, :]]
    lse = logsumexp(c, axis=1)
    pos = np.diagonal(c, axis1=1, axis2=2)
    return np.mean(pos - lse, axis=1) + math.log(k)
