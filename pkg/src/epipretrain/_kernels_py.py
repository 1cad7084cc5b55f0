"""Pure numpy kernels; reference and fallback for the compiled ``_ckernels`` module.

Every function takes and returns C-contiguous float64 arrays.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def layernorm_forward(x, gamma, beta, eps):
    """Row-wise layer norm of a 2-D ``(N, D)`` array -> (y, xhat, rstd)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0].copy()


def layernorm_backward(dy, xhat, rstd, gamma):
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def gelu_forward(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def gelu_backward(x, dy):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def attention_forward(q, k, v, scale):
    """Softmax attention over ``(B, H, L, dh)`` tensors -> (out, probs)."""
    s = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return np.matmul(p, v), p


def attention_backward(dout, q, k, v, probs, scale):
    dv = np.matmul(np.swapaxes(probs, -1, -2), dout)
    dp = np.matmul(dout, np.swapaxes(v, -1, -2))
    ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
    ds *= scale
    dq = np.matmul(ds, k)
    dk = np.matmul(np.swapaxes(ds, -1, -2), q)
    return dq, dk, dv
