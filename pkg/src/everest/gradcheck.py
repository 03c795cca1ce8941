"""Finite-difference gradient oracle.

Central differences at 64-bit are the independent check for every analytic
backward in this package: (f(x+h) - f(x-h)) / 2h per coordinate, compared
with relative error |a - fd| / max(|a|, |fd|, 1e-8).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


class PrecisionError(TypeError):
    """Gradient checking demands float64 inputs."""


def grad_check(f, x, h=DEFAULT_H):
    """Max relative error between analytic grad of f at x and central differences.

    ``f`` maps a Tensor to a scalar Tensor, must be deterministic, and is
    called 2 * x.size + 1 times. ``x`` must be float64; finite differences
    are not trustworthy at float32.
    """
    if x.dtype != np.float64:
        raise PrecisionError(f"grad_check requires float64 input, got {x.dtype}")
    if h <= 0:
        raise ValueError("h must be positive")
    x.grad = None
    with T.Graph() as g:
        y = f(x)
    if y.data.size != 1:
        raise T.ShapeError("grad_check target must be scalar")
    g.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * h)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(a - fd) / denom))


def _leaf(rng, shape, shift=0.0):
    return T.Tensor(rng.standard_normal(shape) + shift, requires_grad=True, dtype=np.float64)


def _const(rng, shape):
    return T.Tensor(np.asarray(rng.standard_normal(shape), dtype=np.float64))


def primitive_checks(seed):
    """Finite-difference battery over every differentiable primitive.

    Each check contracts the op output against a fixed random mixing tensor
    so the scalar target exercises every output coordinate. Returns
    {check name: max relative error}.
    """
    rng = np.random.default_rng(seed)
    out = {}

    x = _leaf(rng, (4, 5))
    w = _const(rng, (5, 3))
    mix = _const(rng, (4, 3))
    out["matmul"] = grad_check(lambda t: (T.matmul(t, w) * mix).sum(), x)

    x = _leaf(rng, (3, 4))
    b = _const(rng, (4,))
    mix = _const(rng, (3, 4))
    out["add_broadcast"] = grad_check(lambda t: ((t + b) * mix).sum(), x)

    x = _leaf(rng, (6,))
    y = _const(rng, (6,))
    out["mul"] = grad_check(lambda t: (t * y * t).sum(), x)

    x = _leaf(rng, (2, 3, 4))
    mix = _const(rng, (3, 2, 4))
    out["reshape_transpose"] = grad_check(
        lambda t: (T.transpose(T.reshape(t, (3, 4, 2)), (0, 2, 1)) * mix).sum(), x
    )

    x = _leaf(rng, (5, 3))
    mix = _const(rng, (3,))
    out["sum_axis"] = grad_check(lambda t: (T.sum_(t, axis=0) * mix).sum(), x)

    # keep inputs away from the |x| kink at 0
    raw = rng.standard_normal(7)
    x = T.Tensor(raw + np.where(raw >= 0, 0.5, -0.5), requires_grad=True, dtype=np.float64)
    mix = _const(rng, (7,))
    out["abs"] = grad_check(lambda t: (T.abs_(t) * mix).sum(), x)

    x = _leaf(rng, (4, 8))
    gm = _leaf(rng, (8,), shift=1.0)
    bt = _leaf(rng, (8,))
    mix = _const(rng, (4, 8))
    out["layer_norm_x"] = grad_check(lambda t: (T.layer_norm(t, gm, bt) * mix).sum(), x)
    out["layer_norm_gamma"] = grad_check(lambda t: (T.layer_norm(x, t, bt) * mix).sum(), gm)
    out["layer_norm_beta"] = grad_check(lambda t: (T.layer_norm(x, gm, t) * mix).sum(), bt)

    x = _leaf(rng, (3, 6))
    mix = _const(rng, (3, 6))
    out["softmax"] = grad_check(lambda t: (T.softmax(t) * mix).sum(), x)

    x = _leaf(rng, (11,))
    mix = _const(rng, (11,))
    out["gelu"] = grad_check(lambda t: (T.gelu(t) * mix).sum(), x)

    x = _leaf(rng, (6, 4))
    idx = rng.integers(0, 6, size=9)
    mix = _const(rng, (9, 4))
    out["gather_rows"] = grad_check(lambda t: (T.gather_rows(t, idx) * mix).sum(), x)

    x = _leaf(rng, (5,))
    mix = _const(rng, (4, 5))
    out["row_repeat"] = grad_check(lambda t: (T.row_repeat(t, 4) * mix).sum(), x)

    x = _leaf(rng, (3, 4))
    other = _const(rng, (2, 4))
    mix = _const(rng, (5, 4))
    out["concat_rows"] = grad_check(lambda t: (T.concat_rows(t, other) * mix).sum(), x)

    x = _leaf(rng, (4, 3))
    labels = rng.integers(0, 3, size=4)
    out["cross_entropy"] = grad_check(lambda t: T.cross_entropy(t, labels), x)

    q = _leaf(rng, (4, 8))
    k = _leaf(rng, (5, 8))
    v = _leaf(rng, (5, 8))
    mix = _const(rng, (4, 8))
    out["attention_q"] = grad_check(lambda t: (T.attention(t, k, v, heads=2) * mix).sum(), q)
    out["attention_k"] = grad_check(lambda t: (T.attention(q, t, v, heads=2) * mix).sum(), k)
    out["attention_v"] = grad_check(lambda t: (T.attention(q, k, t, heads=2) * mix).sum(), v)

    return out
