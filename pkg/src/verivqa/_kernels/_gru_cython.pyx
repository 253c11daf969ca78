# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled GRU sequence kernel.

Same contract and gate layout as gru_numpy; the per-step recurrence and
gate math run in C, matrix products go through BLAS.
"""
import numpy as np

from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemm

NAME = "cython"


cdef inline double _sig(double v) noexcept nogil:
    if v >= 0.0:
        return 1.0 / (1.0 + exp(-v))
    cdef double e = exp(v)
    return e / (1.0 + e)


cdef void _mm_nn(double *a, double *b, double *c,
                 int m, int k, int n, int lda, int ldb, int ldc,
                 double alpha, double beta) noexcept nogil:
    # row-major C(m,n) = alpha * A(m,k) @ B(k,n) + beta * C
    cdef char tn = b'N'
    if m == 0 or n == 0 or k == 0:
        return
    dgemm(&tn, &tn, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef void _mm_nt(double *a, double *b, double *c,
                 int m, int k, int n, int lda, int ldb, int ldc,
                 double alpha, double beta) noexcept nogil:
    # row-major C(m,n) = alpha * A(m,k) @ B(n,k)^T + beta * C
    cdef char tt = b'T'
    cdef char tn = b'N'
    if m == 0 or n == 0 or k == 0:
        return
    dgemm(&tt, &tn, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef void _mm_tn(double *a, double *b, double *c,
                 int m, int k, int n, int lda, int ldb, int ldc,
                 double alpha, double beta) noexcept nogil:
    # row-major C(m,n) = alpha * A(k,m)^T @ B(k,n) + beta * C
    cdef char tn = b'N'
    cdef char tt = b'T'
    if m == 0 or n == 0 or k == 0:
        return
    dgemm(&tn, &tt, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


def gru_forward(x, w, u, b):
    cdef int batch = x.shape[0]
    cdef int steps = x.shape[1]
    cdef int e = x.shape[2]
    cdef int h = w.shape[1] // 3

    xw_np = np.ascontiguousarray(x).reshape(batch * steps, e) @ np.ascontiguousarray(w)
    xw_np = np.ascontiguousarray((xw_np + b).reshape(batch, steps, 3 * h).transpose(1, 0, 2))

    hs_np = np.empty((steps, batch, h))
    rs_np = np.empty_like(hs_np)
    zs_np = np.empty_like(hs_np)
    cs_np = np.empty_like(hs_np)
    hbuf_np = np.zeros((batch, h))
    rh_np = np.empty((batch, h))

    cdef double[:, :, ::1] xw = xw_np
    cdef double[:, :, ::1] hs = hs_np
    cdef double[:, :, ::1] rs = rs_np
    cdef double[:, :, ::1] zs = zs_np
    cdef double[:, :, ::1] cs = cs_np
    cdef double[:, ::1] hbuf = hbuf_np
    cdef double[:, ::1] rh = rh_np
    cdef double[:, ::1] uv = np.ascontiguousarray(u)
    cdef int t, i, j
    cdef double r, z, c

    with nogil:
        for t in range(steps):
            # gates[:, :2h] += h @ u[:, :2h]
            _mm_nn(&hbuf[0, 0], &uv[0, 0], &xw[t, 0, 0],
                   batch, h, 2 * h, h, 3 * h, 3 * h, 1.0, 1.0)
            for i in range(batch):
                for j in range(h):
                    r = _sig(xw[t, i, j])
                    rs[t, i, j] = r
                    zs[t, i, j] = _sig(xw[t, i, h + j])
                    rh[i, j] = r * hbuf[i, j]
            # gates[:, 2h:] += (r*h) @ u[:, 2h:]
            _mm_nn(&rh[0, 0], &uv[0, 2 * h], &xw[t, 0, 2 * h],
                   batch, h, h, h, 3 * h, 3 * h, 1.0, 1.0)
            for i in range(batch):
                for j in range(h):
                    c = tanh(xw[t, i, 2 * h + j])
                    z = zs[t, i, j]
                    cs[t, i, j] = c
                    hbuf[i, j] = (1.0 - z) * hbuf[i, j] + z * c
                    hs[t, i, j] = hbuf[i, j]

    cache = (rs_np, zs_np, cs_np, hs_np)
    return np.ascontiguousarray(hs_np.transpose(1, 0, 2)), cache


def gru_backward(x, w, u, b, cache, grad_hs):
    rs_np, zs_np, cs_np, hs_np = cache
    cdef int batch = x.shape[0]
    cdef int steps = x.shape[1]
    cdef int e = x.shape[2]
    cdef int h = w.shape[1] // 3

    ghs_np = np.ascontiguousarray(grad_hs.transpose(1, 0, 2))
    dgates_np = np.empty((steps, batch, 3 * h))
    gu_np = np.zeros((h, 3 * h))
    dh_np = np.zeros((batch, h))
    rh_np = np.empty((batch, h))
    drh_np = np.empty((batch, h))

    cdef double[:, :, ::1] rs = rs_np
    cdef double[:, :, ::1] zs = zs_np
    cdef double[:, :, ::1] cs = cs_np
    cdef double[:, :, ::1] hs = hs_np
    cdef double[:, :, ::1] ghs = ghs_np
    cdef double[:, :, ::1] dgates = dgates_np
    cdef double[:, ::1] gu = gu_np
    cdef double[:, ::1] dh = dh_np
    cdef double[:, ::1] rh = rh_np
    cdef double[:, ::1] drh = drh_np
    cdef double[:, ::1] uv = np.ascontiguousarray(u)
    cdef int t, i, j
    cdef double hp, r, z, c, dz, dc, dhv, dpc, dr, dpr, dpz

    with nogil:
        for t in range(steps - 1, -1, -1):
            # drh = dpc @ uc^T needs dpc first; do the scalar parts, then BLAS.
            for i in range(batch):
                for j in range(h):
                    hp = hs[t - 1, i, j] if t > 0 else 0.0
                    r = rs[t, i, j]
                    z = zs[t, i, j]
                    c = cs[t, i, j]
                    dhv = dh[i, j] + ghs[t, i, j]
                    dz = dhv * (c - hp)
                    dc = dhv * z
                    dpc = dc * (1.0 - c * c)
                    dgates[t, i, 2 * h + j] = dpc
                    dgates[t, i, h + j] = dz * z * (1.0 - z)
                    dh[i, j] = dhv * (1.0 - z)
                    rh[i, j] = r * hp
            _mm_nt(&dgates[t, 0, 2 * h], &uv[0, 2 * h], &drh[0, 0],
                   batch, h, h, 3 * h, 3 * h, h, 1.0, 0.0)
            for i in range(batch):
                for j in range(h):
                    hp = hs[t - 1, i, j] if t > 0 else 0.0
                    r = rs[t, i, j]
                    dr = drh[i, j] * hp
                    dpr = dr * r * (1.0 - r)
                    dgates[t, i, j] = dpr
                    dh[i, j] += drh[i, j] * r
            # gu accumulation: h_prev^T @ [dpr|dpz], (r*h_prev)^T @ dpc
            if t > 0:
                _mm_tn(&hs[t - 1, 0, 0], &dgates[t, 0, 0], &gu[0, 0],
                       h, batch, 2 * h, h, 3 * h, 3 * h, 1.0, 1.0)
                _mm_tn(&rh[0, 0], &dgates[t, 0, 2 * h], &gu[0, 2 * h],
                       h, batch, h, h, 3 * h, 3 * h, 1.0, 1.0)
            # dh += dpr @ ur^T + dpz @ uz^T
            _mm_nt(&dgates[t, 0, 0], &uv[0, 0], &dh[0, 0],
                   batch, 2 * h, h, 3 * h, 3 * h, h, 1.0, 1.0)

    dg2 = np.ascontiguousarray(dgates_np.transpose(1, 0, 2)).reshape(batch * steps, 3 * h)
    gx = (dg2 @ np.ascontiguousarray(w).T).reshape(batch, steps, e)
    gw = np.ascontiguousarray(x).reshape(batch * steps, e).T @ dg2
    gb = dg2.sum(axis=0)
    return gx, gw, gu_np, gb
