# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()


cdef void _normalize(const double[:, ::1] z, double[:, ::1] u, double[::1] scale,
                     double eps) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double n
    for i in range(z.shape[0]):
        n = 0.0
        for j in range(z.shape[1]):
            n += z[i, j] * z[i, j]
        n = sqrt(n)
        if n < eps:
            n = eps
        scale[i] = n
        for j in range(z.shape[1]):
            u[i, j] = z[i, j] / n


cdef void _normalize_backward(const double[:, ::1] u, const double[::1] scale,
                              double[:, ::1] g, double eps) noexcept nogil:
    # g holds the upstream gradient on entry and the raw-row gradient on exit
    cdef Py_ssize_t i, j
    cdef double radial
    for i in range(u.shape[0]):
        if scale[i] > eps:
            radial = 0.0
            for j in range(u.shape[1]):
                radial += u[i, j] * g[i, j]
            for j in range(u.shape[1]):
                g[i, j] = (g[i, j] - u[i, j] * radial) / scale[i]
        else:
            for j in range(u.shape[1]):
                g[i, j] = g[i, j] / scale[i]


def cosine_infonce(z1, z2, double tau, double eps):
    cdef const double[:, ::1] a = np.ascontiguousarray(z1, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(z2, dtype=np.float64)
    cdef Py_ssize_t K = a.shape[0], D = a.shape[1]
    cdef Py_ssize_t i, j, k, d
    u_arr = np.empty((K, D)); v_arr = np.empty((K, D))
    s_arr = np.empty((K, K))
    su_arr = np.empty(K); sv_arr = np.empty(K)
    g1_arr = np.zeros((K, D)); g2_arr = np.zeros((K, D))
    cdef double[:, ::1] u = u_arr, v = v_arr, S = s_arr, g1 = g1_arr, g2 = g2_arr
    cdef double[::1] su = su_arr, sv = sv_arr
    cdef double acc, m, lse, loss = 0.0, logk = log(<double>K), w
    with nogil:
        _normalize(a, u, su, eps)
        _normalize(b, v, sv, eps)
        for j in range(K):
            for k in range(K):
                acc = 0.0
                for d in range(D):
                    acc += u[j, d] * v[k, d]
                S[j, k] = acc / tau
        # column-wise softmax over j; S is overwritten with dL/dS
        for k in range(K):
            m = S[0, k]
            for j in range(1, K):
                if S[j, k] > m:
                    m = S[j, k]
            acc = 0.0
            for j in range(K):
                acc += exp(S[j, k] - m)
            lse = m + log(acc)
            loss -= S[k, k] - lse + logk
            for j in range(K):
                S[j, k] = exp(S[j, k] - lse) / K
            S[k, k] -= 1.0 / K
        for j in range(K):
            for k in range(K):
                w = S[j, k] / tau
                if w != 0.0:
                    for d in range(D):
                        g1[j, d] += w * v[k, d]
                        g2[k, d] += w * u[j, d]
        _normalize_backward(u, su, g1, eps)
        _normalize_backward(v, sv, g2, eps)
    return loss / K, g1_arr, g2_arr


def infonce_table_terms(critic, s, i1, i2):
    cdef const double[:, :, ::1] c = np.ascontiguousarray(critic, dtype=np.float64)
    cdef const long long[::1] ss = np.ascontiguousarray(s, dtype=np.int64)
    cdef const long long[:, ::1] a = np.ascontiguousarray(i1, dtype=np.int64)
    cdef const long long[:, ::1] b = np.ascontiguousarray(i2, dtype=np.int64)
    cdef Py_ssize_t n = a.shape[0], K = a.shape[1]
    cdef Py_ssize_t t, j, k
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double m, acc, total, val, logk = log(<double>K)
    cdef long long si
    with nogil:
        for t in range(n):
            si = ss[t]
            total = 0.0
            for k in range(K):
                m = c[si, a[t, 0], b[t, k]]
                for j in range(1, K):
                    val = c[si, a[t, j], b[t, k]]
                    if val > m:
                        m = val
                acc = 0.0
                for j in range(K):
                    acc += exp(c[si, a[t, j], b[t, k]] - m)
                total += c[si, a[t, k], b[t, k]] - (m + log(acc))
            out[t] = total / K + logk
    return out_arr
