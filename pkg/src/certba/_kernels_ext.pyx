# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-frame block kernels. Semantics match ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, fabs

cnp.import_array()


cdef inline void _rta(const double[:, :, ::1] R, const double[:, :, ::1] A,
                      Py_ssize_t n, Py_ssize_t r, double* M) noexcept nogil:
    # M = R_n^T A_n, 3 x 3 row-major
    cdef Py_ssize_t i, j, k
    cdef double acc
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(r):
                acc = acc + R[n, k, i] * A[n, k, j]
            M[3 * i + j] = acc


def project_tangent(const double[:, :, ::1] R, const double[:, :, ::1] A):
    cdef Py_ssize_t N = R.shape[0], r = R.shape[1]
    out_arr = np.empty((N, r, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef double M[9]
    cdef double S[9]
    cdef double radial, acc
    cdef Py_ssize_t n, i, j, k
    with nogil:
        for n in range(N):
            _rta(R, A, n, r, M)
            for i in range(3):
                for j in range(3):
                    S[3 * i + j] = 0.5 * (M[3 * i + j] + M[3 * j + i])
            radial = 0.0
            if n > 0:
                radial = (M[0] + M[4] + M[8]) / 3.0
            for k in range(r):
                for j in range(3):
                    acc = A[n, k, j] + radial * R[n, k, j]
                    for i in range(3):
                        acc = acc - R[n, k, i] * S[3 * i + j]
                    out[n, k, j] = acc
    return out_arr


def weingarten(const double[:, :, ::1] R, const double[:] scales,
               const double[:, :, ::1] G, const double[:, :, ::1] xi):
    cdef Py_ssize_t N = R.shape[0], r = R.shape[1]
    out_arr = np.empty((N, r, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef double M[9]
    cdef double S[9]
    cdef double tr, acc, inv_s
    cdef Py_ssize_t n, i, j, k
    with nogil:
        for n in range(N):
            _rta(R, G, n, r, M)
            tr = 0.0
            if n > 0:
                tr = (M[0] + M[4] + M[8]) / 3.0
            inv_s = 1.0 / scales[n]
            for i in range(3):
                for j in range(3):
                    S[3 * i + j] = 0.5 * (M[3 * i + j] + M[3 * j + i]) * inv_s
                S[4 * i] = S[4 * i] - tr * inv_s
            for k in range(r):
                for j in range(3):
                    acc = 0.0
                    for i in range(3):
                        acc = acc + xi[n, k, i] * S[3 * i + j]
                    out[n, k, j] = -acc
    return out_arr


def retract(const double[:, :, ::1] R, const double[:] scales,
            const double[:, :, ::1] xi, double step):
    cdef Py_ssize_t N = R.shape[0], r = R.shape[1]
    R_arr = np.empty((N, r, 3))
    s_arr = np.empty(N)
    cdef double[:, :, ::1] Rn = R_arr
    cdef double[:] sn = s_arr
    cdef double delta, c, dot, nrm, ref
    cdef Py_ssize_t n, i, j, k
    cdef bint failed = False
    with nogil:
        for n in range(N):
            delta = 0.0
            if n > 0:
                for k in range(r):
                    for j in range(3):
                        delta = delta + xi[n, k, j] * R[n, k, j]
                delta = delta / 3.0
            c = step / scales[n]
            for k in range(r):
                for j in range(3):
                    Rn[n, k, j] = R[n, k, j] + c * (xi[n, k, j] - delta * R[n, k, j])
            for j in range(3):
                ref = 0.0
                for k in range(r):
                    ref = ref + Rn[n, k, j] * Rn[n, k, j]
                for i in range(j):
                    dot = 0.0
                    for k in range(r):
                        dot = dot + Rn[n, k, i] * Rn[n, k, j]
                    for k in range(r):
                        Rn[n, k, j] = Rn[n, k, j] - dot * Rn[n, k, i]
                nrm = 0.0
                for k in range(r):
                    nrm = nrm + Rn[n, k, j] * Rn[n, k, j]
                nrm = sqrt(nrm)
                if nrm <= 1e-14 * (1.0 + sqrt(ref)):
                    failed = True
                    nrm = 1.0
                for k in range(r):
                    Rn[n, k, j] = Rn[n, k, j] / nrm
            if n == 0:
                sn[n] = scales[n]
            else:
                sn[n] = scales[n] * exp(step * delta / scales[n])
    if failed:
        raise FloatingPointError("retraction failure: rank-deficient block")
    return R_arr, s_arr


def dual_blocks(const double[:, :, ::1] R, const double[:] scales,
                const double[:, :, ::1] P):
    cdef Py_ssize_t N = R.shape[0], r = R.shape[1]
    out_arr = np.empty((N, 3, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef double M[9]
    cdef double tr, inv_s
    cdef Py_ssize_t n, i, j
    with nogil:
        for n in range(N):
            # M = R^T P, so sym(P^T R) = sym(M)
            _rta(R, P, n, r, M)
            inv_s = 1.0 / scales[n]
            tr = 0.0
            if n > 0:
                tr = (M[0] + M[4] + M[8]) / 3.0
            for i in range(3):
                for j in range(3):
                    out[n, i, j] = 0.5 * (M[3 * i + j] + M[3 * j + i]) * inv_s
                out[n, i, i] = out[n, i, i] - tr * inv_s
    return out_arr


def frame_moments(const cnp.int64_t[:] frames, const double[:, ::1] points,
                  const double[:] weights, Py_ssize_t n_frames):
    cdef Py_ssize_t E = frames.shape[0]
    deg_arr = np.zeros(n_frames)
    first_arr = np.zeros((n_frames, 3))
    second_arr = np.zeros((n_frames, 3, 3))
    cdef double[:] deg = deg_arr
    cdef double[:, ::1] first = first_arr
    cdef double[:, :, ::1] second = second_arr
    cdef Py_ssize_t e, f, i, j
    cdef double w
    with nogil:
        for e in range(E):
            f = frames[e]
            w = weights[e]
            deg[f] = deg[f] + w
            for i in range(3):
                first[f, i] = first[f, i] + w * points[e, i]
                for j in range(3):
                    second[f, i, j] = second[f, i, j] + w * points[e, i] * points[e, j]
    return deg_arr, first_arr, second_arr
