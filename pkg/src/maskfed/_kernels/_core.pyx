# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled fused kernels. Must match py_impl semantics; see that module."""

from libc.math cimport exp, sqrt, tanh, pow

import numpy as np

NAME = "cy"

ctypedef fused floating:
    float
    double

cdef double _SQRT_2_OVER_PI = 0.7978845608028654
cdef double _GELU_CUBIC = 0.044715


def gelu_fwd(x):
    out = np.empty_like(x)
    _gelu_fwd(np.ascontiguousarray(x).reshape(-1), out.reshape(-1))
    return out


def gelu_bwd(x, dy):
    out = np.empty_like(x)
    _gelu_bwd(np.ascontiguousarray(x).reshape(-1),
              np.ascontiguousarray(dy).reshape(-1), out.reshape(-1))
    return out


def softmax_fwd(x):
    out = np.empty_like(x)
    _softmax_fwd(x, out)
    return out


def softmax_bwd(y, dy):
    out = np.empty_like(y)
    _softmax_bwd(y, np.ascontiguousarray(dy), out)
    return out


def layernorm_fwd(x, gain, bias, eps):
    y = np.empty_like(x)
    mu = np.empty(x.shape[0], dtype=x.dtype)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    _layernorm_fwd(x, gain, bias, float(eps), y, mu, rstd)
    return y, mu, rstd


def layernorm_bwd(x, gain, mu, rstd, dy):
    dx = np.empty_like(x)
    dg = np.zeros(x.shape[1], dtype=x.dtype)
    db = np.zeros(x.shape[1], dtype=x.dtype)
    _layernorm_bwd(x, gain, mu, rstd, np.ascontiguousarray(dy), dx, dg, db)
    return dx, dg, db


def adamw_update(p, grad, m, v, lr, beta1, beta2, eps, wd, t):
    _adamw(p, grad, m, v, float(lr), float(beta1), float(beta2), float(eps),
           float(wd), int(t))


def _gelu_fwd(floating[::1] x, floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, u
    with nogil:
        for i in range(n):
            v = x[i]
            u = _SQRT_2_OVER_PI * (v + _GELU_CUBIC * v * v * v)
            out[i] = <floating>(0.5 * v * (1.0 + tanh(u)))


def _gelu_bwd(floating[::1] x, floating[::1] dy, floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, u, t, du
    with nogil:
        for i in range(n):
            v = x[i]
            u = _SQRT_2_OVER_PI * (v + _GELU_CUBIC * v * v * v)
            t = tanh(u)
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * v * v)
            out[i] = <floating>(dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))


def _softmax_fwd(floating[:, ::1] x, floating[:, ::1] out):
    cdef Py_ssize_t i, j, rows = x.shape[0], cols = x.shape[1]
    cdef double mx, s
    with nogil:
        for i in range(rows):
            mx = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(cols):
                out[i, j] = <floating>exp(x[i, j] - mx)
                s += out[i, j]
            for j in range(cols):
                out[i, j] = <floating>(out[i, j] / s)


def _softmax_bwd(floating[:, ::1] y, floating[:, ::1] dy, floating[:, ::1] out):
    cdef Py_ssize_t i, j, rows = y.shape[0], cols = y.shape[1]
    cdef double s
    with nogil:
        for i in range(rows):
            s = 0.0
            for j in range(cols):
                s += dy[i, j] * y[i, j]
            for j in range(cols):
                out[i, j] = <floating>(y[i, j] * (dy[i, j] - s))


def _layernorm_fwd(floating[:, ::1] x, floating[::1] gain, floating[::1] bias,
                   double eps, floating[:, ::1] y, floating[::1] mu,
                   floating[::1] rstd):
    cdef Py_ssize_t i, j, rows = x.shape[0], cols = x.shape[1]
    cdef double s, var, m, r
    with nogil:
        for i in range(rows):
            s = 0.0
            for j in range(cols):
                s += x[i, j]
            m = s / cols
            var = 0.0
            for j in range(cols):
                var += (x[i, j] - m) * (x[i, j] - m)
            var /= cols
            r = 1.0 / sqrt(var + eps)
            mu[i] = <floating>m
            rstd[i] = <floating>r
            for j in range(cols):
                y[i, j] = <floating>(((x[i, j] - m) * r) * gain[j] + bias[j])


def _layernorm_bwd(floating[:, ::1] x, floating[::1] gain, floating[::1] mu,
                   floating[::1] rstd, floating[:, ::1] dy, floating[:, ::1] dx,
                   floating[::1] dg, floating[::1] db):
    cdef Py_ssize_t i, j, rows = x.shape[0], cols = x.shape[1]
    cdef double m1, m2, xhat, dxh
    with nogil:
        for i in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(cols):
                xhat = (x[i, j] - mu[i]) * rstd[i]
                dxh = dy[i, j] * gain[j]
                m1 += dxh
                m2 += dxh * xhat
            m1 /= cols
            m2 /= cols
            for j in range(cols):
                xhat = (x[i, j] - mu[i]) * rstd[i]
                dxh = dy[i, j] * gain[j]
                dx[i, j] = <floating>((dxh - m1 - xhat * m2) * rstd[i])
                dg[j] += <floating>(dy[i, j] * xhat)
                db[j] += dy[i, j]


def _adamw(floating[::1] p, floating[::1] grad, floating[::1] m, floating[::1] v,
           double lr, double beta1, double beta2, double eps, double wd, long t):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - pow(beta1, t)
    cdef double bc2 = 1.0 - pow(beta2, t)
    cdef double mi, vi
    with nogil:
        for i in range(n):
            mi = beta1 * m[i] + (1.0 - beta1) * grad[i]
            vi = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i]
            m[i] = <floating>mi
            v[i] = <floating>vi
            p[i] = <floating>(p[i] - lr * ((mi / bc1) / (sqrt(vi / bc2) + eps) + wd * p[i]))
