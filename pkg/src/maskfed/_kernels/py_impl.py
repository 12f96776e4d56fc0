"""NumPy reference implementations of the fused kernels.

Semantics here are the contract; the compiled backend in _core.pyx must
match these up to floating-point reassociation. All reduction kernels
take 2-D inputs (rows x features); callers flatten leading dimensions.
"""

import numpy as np

NAME = "py"

_SQRT_2_OVER_PI = 0.7978845608028654
_GELU_CUBIC = 0.044715


def gelu_fwd(x):
    # tanh-approximate GELU, smooth everywhere (finite-difference friendly)
    u = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(x, dy):
    u = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x * x * x)
    t = np.tanh(u)
    du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, dy):
    s = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - s)


def layernorm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1)
    xc = x - mu[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gain + bias, mu, rstd


def layernorm_bwd(x, gain, mu, rstd, dy):
    xhat = (x - mu[:, None]) * rstd[:, None]
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    return dx, dg, db


def adamw_update(p, grad, m, v, lr, beta1, beta2, eps, wd, t):
    """Decoupled-weight-decay Adam step, in place on p/m/v (1-D views)."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)
