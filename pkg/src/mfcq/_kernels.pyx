# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled simulation kernels; see ``_kernels_py`` for the reference semantics."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def lq_euler_step(const double[:, ::1] X, const double[:, ::1] A, const double[::1] dW, double dB, extra,
                  const double[::1] drift_c, const double[:, ::1] B, const double[:, ::1] C,
                  const double[::1] sig_c, const double[:, ::1] D, const double[:, ::1] F,
                  const double[::1] sigo_c, const double[:, ::1] Do, const double[:, ::1] Fo,
                  const double[:, ::1] M, const double[:, ::1] R, const double[::1] O,
                  double reward_c, double dt, double[::1] reward):
    cdef Py_ssize_t N = X.shape[0], d = X.shape[1], p = A.shape[1]
    cdef Py_ssize_t i, r, j, k
    cdef double drift, s, so, acc, row
    cdef bint has_extra = extra is not None
    cdef const double[:, ::1] ex
    out_arr = np.empty((N, d))
    cdef double[:, ::1] out = out_arr
    if has_extra:
        ex = extra
    with nogil:
        for i in range(N):
            acc = reward_c
            for r in range(d):
                drift = drift_c[r]
                s = sig_c[r]
                so = sigo_c[r]
                row = 0.0
                for j in range(d):
                    drift = drift + B[r, j] * X[i, j]
                    s = s + D[r, j] * X[i, j]
                    so = so + Do[r, j] * X[i, j]
                    row = row + M[r, j] * X[i, j]
                for k in range(p):
                    drift = drift + C[r, k] * A[i, k]
                    s = s + F[r, k] * A[i, k]
                    so = so + Fo[r, k] * A[i, k]
                acc = acc + X[i, r] * (row + O[r])
                out[i, r] = X[i, r] + drift * dt + s * dW[i] + so * dB
                if has_extra:
                    out[i, r] = out[i, r] + ex[i, r]
            for k in range(p):
                row = 0.0
                for j in range(p):
                    row = row + R[k, j] * A[i, j]
                acc = acc + A[i, k] * row
            reward[i] = reward[i] + acc * dt
    return out_arr


def gaussian_actions(const double[:, ::1] X, const double[:, ::1] Z, const double[:, ::1] K,
                     const double[::1] shift, const double[:, ::1] L):
    cdef Py_ssize_t N = X.shape[0], d = X.shape[1], p = K.shape[0]
    cdef Py_ssize_t i, k, j
    cdef double v
    out_arr = np.empty((N, p))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(N):
            for k in range(p):
                v = shift[k]
                for j in range(d):
                    v = v + K[k, j] * X[i, j]
                for j in range(p):
                    v = v + L[k, j] * Z[i, j]
                out[i, k] = v
    return out_arr
