# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-step network kernels.

Same signatures and semantics as ``distfilt._kernels_py``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, tanh

cnp.import_array()

DEF OK = 0
DEF SINGULAR = 1


def predict_covariance(A, const double[:, :, ::1] P, const double[:, ::1] Q):
    cdef Py_ssize_t n = P.shape[0], d = P.shape[1]
    cdef Py_ssize_t a, i, j, k, l
    cdef double s
    cdef const double[:, :, ::1] A3
    if A.ndim == 2:
        A3 = np.array(np.broadcast_to(A, (n, d, d)), dtype=np.float64, order="C")
    else:
        A3 = np.ascontiguousarray(A, dtype=np.float64)
    out_arr = np.empty((n, d, d))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] T = np.empty((d, d))
    with nogil:
        for a in range(n):
            for i in range(d):
                for k in range(d):
                    s = 0.0
                    for j in range(d):
                        s = s + A3[a, i, j] * P[a, j, k]
                    T[i, k] = s
            for i in range(d):
                for l in range(d):
                    s = Q[i, l]
                    for k in range(d):
                        s = s + T[i, k] * A3[a, l, k]
                    out[a, i, l] = s
    return out_arr


cdef int _cholesky(double[:, ::1] S, Py_ssize_t m) nogil:
    """In-place lower Cholesky; returns SINGULAR on a non-positive pivot."""
    cdef Py_ssize_t i, j, k
    cdef double s
    for j in range(m):
        s = S[j, j]
        for k in range(j):
            s = s - S[j, k] * S[j, k]
        if not s > 0.0:
            return SINGULAR
        S[j, j] = sqrt(s)
        for i in range(j + 1, m):
            s = S[i, j]
            for k in range(j):
                s = s - S[i, k] * S[j, k]
            S[i, j] = s / S[j, j]
    return OK


def ekf_update(const double[:, ::1] xbar, const double[:, :, ::1] Pbar, const double[:, :, ::1] H,
               const double[:, ::1] innov, const double[:, :, ::1] R, mask):
    cdef Py_ssize_t n = xbar.shape[0], d = xbar.shape[1], m = H.shape[1]
    cdef Py_ssize_t a, i, j, k, l
    cdef double s
    cdef int status = OK
    cdef const double[:, ::1] msk = np.ascontiguousarray(mask, dtype=np.float64)
    phi_arr = np.empty((n, d))
    P_arr = np.empty((n, d, d))
    K_arr = np.empty((n, d, m))
    cdef double[:, ::1] phi = phi_arr
    cdef double[:, :, ::1] P = P_arr
    cdef double[:, :, ::1] K = K_arr
    cdef double[:, ::1] PHt = np.empty((d, m))
    cdef double[:, ::1] S = np.empty((m, m))
    cdef double[:, ::1] IKH = np.empty((d, d))
    cdef double[:, ::1] T = np.empty((d, d))
    cdef double[:, ::1] KR = np.empty((d, m))
    cdef double[::1] z = np.empty(m)
    with nogil:
        for a in range(n):
            # PHt = Pbar H^T
            for i in range(d):
                for j in range(m):
                    s = 0.0
                    for k in range(d):
                        s = s + Pbar[a, i, k] * H[a, j, k]
                    PHt[i, j] = s
            # S = H Pbar H^T + R, symmetrised
            for i in range(m):
                for j in range(i + 1):
                    s = 0.0
                    for k in range(d):
                        s = s + H[a, i, k] * PHt[k, j]
                    s = s + 0.5 * (R[a, i, j] + R[a, j, i])
                    S[i, j] = s
                    S[j, i] = s
            if _cholesky(S, m) != OK:
                status = SINGULAR
                break
            # K row i solves S k = PHt[i, :]
            for i in range(d):
                for j in range(m):
                    s = PHt[i, j]
                    for k in range(j):
                        s = s - S[j, k] * z[k]
                    z[j] = s / S[j, j]
                for j in range(m - 1, -1, -1):
                    s = z[j]
                    for k in range(j + 1, m):
                        s = s - S[k, j] * z[k]
                    z[j] = s / S[j, j]
                for j in range(m):
                    K[a, i, j] = z[j] * msk[a, i]
            for i in range(d):
                s = xbar[a, i]
                for j in range(m):
                    s = s + K[a, i, j] * innov[a, j]
                phi[a, i] = s
            # Joseph form: (I - KH) Pbar (I - KH)^T + K R K^T
            for i in range(d):
                for l in range(d):
                    s = 1.0 if i == l else 0.0
                    for j in range(m):
                        s = s - K[a, i, j] * H[a, j, l]
                    IKH[i, l] = s
            for i in range(d):
                for l in range(d):
                    s = 0.0
                    for k in range(d):
                        s = s + IKH[i, k] * Pbar[a, k, l]
                    T[i, l] = s
            for i in range(d):
                for j in range(m):
                    s = 0.0
                    for k in range(m):
                        s = s + K[a, i, k] * R[a, k, j]
                    KR[i, j] = s
            for i in range(d):
                for l in range(d):
                    s = 0.0
                    for k in range(d):
                        s = s + T[i, k] * IKH[l, k]
                    for j in range(m):
                        s = s + KR[i, j] * K[a, l, j]
                    P[a, i, l] = s
            for i in range(d):
                for l in range(i):
                    s = 0.5 * (P[a, i, l] + P[a, l, i])
                    P[a, i, l] = s
                    P[a, l, i] = s
    if status != OK:
        return None, None, None, status
    return phi_arr, P_arr, K_arr, OK


def gradient_update(const double[:, ::1] xbar, const double[:, :, ::1] H, const double[:, ::1] innov,
                    double zeta, mask):
    cdef Py_ssize_t n = xbar.shape[0], d = xbar.shape[1], m = H.shape[1]
    cdef Py_ssize_t a, i, j
    cdef double s, g
    cdef const double[:, ::1] msk = np.ascontiguousarray(mask, dtype=np.float64)
    phi_arr = np.empty((n, d))
    K_arr = np.empty((n, d, m))
    cdef double[:, ::1] phi = phi_arr
    cdef double[:, :, ::1] K = K_arr
    with nogil:
        for a in range(n):
            for i in range(d):
                s = xbar[a, i]
                for j in range(m):
                    g = 2.0 * zeta * H[a, j, i] * msk[a, i]
                    K[a, i, j] = g
                    s = s + g * innov[a, j]
                phi[a, i] = s
    return phi_arr, K_arr


def combine(const int[::1] indptr, const int[::1] indices, const double[::1] data,
            const double[:, ::1] phi):
    cdef Py_ssize_t n = indptr.shape[0] - 1, d = phi.shape[1]
    cdef Py_ssize_t i, p, k, j
    cdef double c
    out_arr = np.zeros((n, d))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                c = data[p]
                for k in range(d):
                    out[i, k] = out[i, k] + c * phi[j, k]
    return out_arr


def tanh_observe(const double[:, ::1] X, const double[:, :, ::1] Z):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], m = Z.shape[1]
    cdef Py_ssize_t a, i, k
    cdef double s, t, g
    h_arr = np.empty((n, m))
    H_arr = np.empty((n, m, d))
    cdef double[:, ::1] h = h_arr
    cdef double[:, :, ::1] Hj = H_arr
    with nogil:
        for a in range(n):
            for i in range(m):
                s = 0.0
                for k in range(d):
                    s = s + Z[a, i, k] * X[a, k]
                t = tanh(s)
                h[a, i] = t
                g = 1.0 - t * t
                for k in range(d):
                    Hj[a, i, k] = g * Z[a, i, k]
    return h_arr, H_arr
