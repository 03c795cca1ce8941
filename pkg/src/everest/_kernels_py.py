"""Numpy implementations of the fused kernels.

This is the pure-python fallback backend. Every function here has a
signature-compatible twin in the compiled ``_ckernels`` extension; which of
the two a process uses is decided once, in :mod:`everest.backend`.

Dense matrix products are NOT part of the kernel set: both backends delegate
those to numpy's BLAS, which a hand-rolled loop cannot beat. The kernels below
are the ops where a fused single pass wins over a chain of numpy array ops.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def layer_norm_fwd(x, gamma, beta, eps):
    """Row-wise layer norm. x: (rows, d). Returns (y, mean, rstd)."""
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean[:, None]) * rstd[:, None] * gamma + beta
    return y.astype(x.dtype, copy=False), mean.astype(x.dtype, copy=False), rstd.astype(x.dtype, copy=False)


def layer_norm_bwd(g, x, gamma, mean, rstd):
    """Backward of layer_norm_fwd. Returns (dx, dgamma, dbeta)."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    dbeta = g.sum(axis=0)
    dgamma = (g * xhat).sum(axis=0)
    gg = g * gamma
    d = x.shape[1]
    m1 = gg.mean(axis=1, keepdims=True)
    m2 = (gg * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (gg - m1 - xhat * m2)
    return dx.astype(x.dtype, copy=False), dgamma.astype(x.dtype, copy=False), dbeta.astype(x.dtype, copy=False)


def softmax_fwd(x):
    """Row-wise softmax. x: (rows, n)."""
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_bwd(g, p):
    """Backward of softmax_fwd given the forward output p."""
    inner = (g * p).sum(axis=1, keepdims=True)
    return p * (g - inner)


def gelu_fwd(x):
    """Exact-erf GELU, elementwise on a flat array."""
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_bwd(g, x):
    """Backward of gelu_fwd: d/dx [x*Phi(x)] = Phi(x) + x*phi(x)."""
    phi = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return (g * (cdf + x * phi)).astype(x.dtype, copy=False)


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """Fused AdamW step, in place on p, m, v (flat float arrays).

    Decoupled weight decay: the decay term is applied directly to the
    weights and never enters the moment estimates.
    """
    p *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    denom = np.sqrt(v / c2) + eps
    p -= lr * (m / c1) / denom
