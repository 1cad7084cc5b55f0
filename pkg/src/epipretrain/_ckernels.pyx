# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels mirroring ``_kernels_py``; same signatures and return layout."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


cdef inline double _tanh(double y) noexcept nogil:
    # exp-based; libc tanh is several times slower here
    cdef double e
    if y > 20.0:
        return 1.0
    if y < -20.0:
        return -1.0
    if fabs(y) < 1e-4:
        return y - y * y * y / 3.0
    e = exp(2.0 * y)
    return (e - 1.0) / (e + 1.0)


def layernorm_forward(const double[:, ::1] x, const double[::1] gamma, const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d))
    xhat_arr = np.empty((n, d))
    rstd_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, r, c
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                c = (x[i, j] - mu) * r
                xhat[i, j] = c
                y[i, j] = c * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layernorm_backward(const double[:, ::1] dy, const double[:, ::1] xhat, const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    dx_arr = np.empty((n, d))
    dg_arr = np.zeros(d)
    db_arr = np.zeros(d)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dg = dg_arr
    cdef double[::1] db = db_arr
    cdef double m1, m2, g
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = dy[i, j] * gamma[j]
                m1 += g
                m2 += g * xhat[i, j]
                dg[j] += dy[i, j] * xhat[i, j]
                db[j] += dy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dx[i, j] = rstd[i] * (dy[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
    return dx_arr, dg_arr, db_arr


def gelu_forward(x):
    cdef cnp.ndarray[double, ndim=1] flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] xi = flat
    cdef double[::1] o = out
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double v
    with nogil:
        for i in range(n):
            v = xi[i]
            o[i] = 0.5 * v * (1.0 + _tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out.reshape(np.shape(x))


def gelu_backward(x, dy):
    cdef cnp.ndarray[double, ndim=1] fx = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[double, ndim=1] fd = np.ascontiguousarray(dy, dtype=np.float64).reshape(-1)
    out = np.empty_like(fx)
    cdef double[::1] xi = fx
    cdef double[::1] di = fd
    cdef double[::1] o = out
    cdef Py_ssize_t i, n = fx.shape[0]
    cdef double v, t, dt
    with nogil:
        for i in range(n):
            v = xi[i]
            t = _tanh(GELU_C * (v + GELU_A * v * v * v))
            dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            o[i] = di[i] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return out.reshape(np.shape(x))


def attention_forward(const double[:, :, :, ::1] q, const double[:, :, :, ::1] k,
                      const double[:, :, :, ::1] v, double scale):
    cdef Py_ssize_t B = q.shape[0], H = q.shape[1], L = q.shape[2], dh = q.shape[3]
    cdef Py_ssize_t b, h, i, j, e
    out_arr = np.zeros((B, H, L, dh))
    p_arr = np.empty((B, H, L, L))
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] p = p_arr
    cdef double s, m, tot
    with nogil:
        for b in range(B):
            for h in range(H):
                for i in range(L):
                    m = -1e300
                    for j in range(L):
                        s = 0.0
                        for e in range(dh):
                            s += q[b, h, i, e] * k[b, h, j, e]
                        s *= scale
                        p[b, h, i, j] = s
                        if s > m:
                            m = s
                    tot = 0.0
                    for j in range(L):
                        s = exp(p[b, h, i, j] - m)
                        p[b, h, i, j] = s
                        tot += s
                    for j in range(L):
                        p[b, h, i, j] /= tot
                    for j in range(L):
                        s = p[b, h, i, j]
                        for e in range(dh):
                            out[b, h, i, e] += s * v[b, h, j, e]
    return out_arr, p_arr


def attention_backward(const double[:, :, :, ::1] dout, const double[:, :, :, ::1] q,
                       const double[:, :, :, ::1] k, const double[:, :, :, ::1] v,
                       const double[:, :, :, ::1] probs, double scale):
    cdef Py_ssize_t B = q.shape[0], H = q.shape[1], L = q.shape[2], dh = q.shape[3]
    cdef Py_ssize_t b, h, i, j, e
    dq_arr = np.zeros((B, H, L, dh))
    dk_arr = np.zeros((B, H, L, dh))
    dv_arr = np.zeros((B, H, L, dh))
    dp_arr = np.empty(L)
    cdef double[:, :, :, ::1] dq = dq_arr
    cdef double[:, :, :, ::1] dk = dk_arr
    cdef double[:, :, :, ::1] dv = dv_arr
    cdef double[::1] dp = dp_arr
    cdef double s, acc, pij
    with nogil:
        for b in range(B):
            for h in range(H):
                for i in range(L):
                    acc = 0.0
                    for j in range(L):
                        s = 0.0
                        for e in range(dh):
                            s += dout[b, h, i, e] * v[b, h, j, e]
                        dp[j] = s
                        acc += s * probs[b, h, i, j]
                    for j in range(L):
                        pij = probs[b, h, i, j]
                        for e in range(dh):
                            dv[b, h, j, e] += pij * dout[b, h, i, e]
                        s = pij * (dp[j] - acc) * scale
                        for e in range(dh):
                            dq[b, h, i, e] += s * k[b, h, j, e]
                            dk[b, h, j, e] += s * q[b, h, i, e]
    return dq_arr, dk_arr, dv_arr
