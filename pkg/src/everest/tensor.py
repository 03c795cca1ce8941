"""Dense tensors with reverse-mode differentiation on a recorded tape.

The design is a tape (``Graph``) of executed primitives rather than a
per-tensor closure web: ops executed inside a ``with Graph() as g:`` block
append nodes in execution order, and ``g.backward(loss)`` walks the tape
once in reverse. Outside any active graph the same ops run as plain numpy
forward computations, which is the evaluation path.

Float32 is the training dtype; gradient checking requires float64 (see
:mod:`everest.gradcheck`). Every completed op verifies its output is finite
and raises :class:`NonFiniteError` otherwise.
"""

from __future__ import annotations

import math

import numpy as np

from . import backend as K


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes violate an op precondition."""


class GraphError(RuntimeError):
    """Backward request inconsistent with the recorded tape."""


DEFAULT_DTYPE = np.float32

_finite_checks = True


def set_finite_checks(enabled):
    """Toggle the per-op NaN/Inf scan (on by default)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def _check_finite(arr, op):
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A dense array plus autodiff metadata.

    ``data`` is a numpy float32/float64 array. ``requires_grad`` marks leaf
    tensors (parameters); tensors produced by ops get the flag transitively
    while a graph is active. Data is treated as immutable once created;
    the one sanctioned mutation is the optimizer's in-place update.
    """

    __slots__ = ("data", "grad", "requires_grad", "_is_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._is_leaf = True
        _check_finite(arr, "tensor init")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


class _Node:
    __slots__ = ("out", "inputs", "bwd", "op")

    def __init__(self, out, inputs, bwd, op):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd
        self.op = op


_active_graph = None


class Graph:
    """Ordered tape of executed differentiable ops.

    Nodes are appended in execution order, which is by construction a valid
    topological order; backward walks the list once in reverse.
    """

    def __init__(self):
        self._nodes = []
        self._out_ids = set()

    def __enter__(self):
        global _active_graph
        if _active_graph is not None:
            raise GraphError("a graph is already active")
        _active_graph = self
        return self

    def __exit__(self, *exc):
        global _active_graph
        _active_graph = None
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, node):
        self._nodes.append(node)
        self._out_ids.add(id(node.out))

    def backward(self, loss):
        """Populate ``.grad`` on every requires_grad leaf reachable from loss."""
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        if id(loss) not in self._out_ids:
            raise GraphError("loss node was not recorded in this graph")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gt in zip(node.inputs, node.bwd(g)):
                if gt is None or not t.requires_grad:
                    continue
                if t._is_leaf:
                    t.grad = gt if t.grad is None else t.grad + gt
                else:
                    tid = id(t)
                    prev = grads.get(tid)
                    grads[tid] = gt if prev is None else prev + gt


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, inputs, bwd, op):
    """Create the output tensor and record the node if a graph is tracking."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _active_graph is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out._is_leaf = not track
    if track:
        _active_graph._record(_Node(out, inputs, bwd, op))
    return out


def _sum_to(g, shape):
    """Reduce a broadcasted gradient back to the operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, getattr(b, "dtype", None) or DEFAULT_DTYPE)
    b = _wrap(b, a.dtype)
    data = a.data + b.data

    def bwd(g):
        return _sum_to(g, a.data.shape), _sum_to(g, b.data.shape)

    return _make(data, (a, b), bwd, "add")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, getattr(b, "dtype", None) or DEFAULT_DTYPE)
    b = _wrap(b, a.dtype)
    data = a.data * b.data

    def bwd(g):
        return _sum_to(g * b.data, a.data.shape), _sum_to(g * a.data, b.data.shape)

    return _make(data, (a, b), bwd, "mul")


def matmul(a, b):
    """Matrix product; operands must have equal ndim (2d, or stacked 3d/4d)."""
    if a.data.ndim != b.data.ndim or a.data.ndim < 2:
        raise ShapeError(f"matmul needs equal ndim >= 2, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2] or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2)) if a.requires_grad else None
        gb = np.matmul(a.data.swapaxes(-1, -2), g) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bwd, "matmul")


def transpose(a, axes=None):
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(data, (a,), bwd, "transpose")


def swapaxes(a, i, j):
    data = a.data.swapaxes(i, j)

    def bwd(g):
        return (g.swapaxes(i, j),)

    return _make(data, (a,), bwd, "swapaxes")


def reshape(a, shape):
    old = a.data.shape
    data = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _make(data, (a,), bwd, "reshape")


def sum_(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.data.shape).copy(),)

    return _make(np.asarray(data), (a,), bwd, "sum")


def mean_(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def abs_(a):
    data = np.abs(a.data)
    sign = np.sign(a.data)

    def bwd(g):
        return (g * sign,)

    return _make(data, (a,), bwd, "abs")


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis: (x - mean)/sqrt(var + eps) * gamma + beta.

    Variance is the population variance of the row.
    """
    if eps <= 0:
        raise ShapeError("eps must be positive")
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError("gamma/beta must have shape (d,)")
    rows = np.ascontiguousarray(x.data.reshape(-1, d))
    y, mean, rstd = K.layer_norm_fwd(rows, gamma.data, beta.data, float(eps))

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        dx, dgamma, dbeta = K.layer_norm_bwd(g2, rows, gamma.data, mean, rstd)
        return dx.reshape(x.data.shape), dgamma, dbeta

    return _make(y.reshape(x.data.shape), (x, gamma, beta), bwd, "layer_norm")


def softmax(x):
    """Softmax over the last axis, exponent-shifted by the row max."""
    n = x.data.shape[-1]
    rows = np.ascontiguousarray(x.data.reshape(-1, n))
    p = K.softmax_fwd(rows)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, n))
        return (K.softmax_bwd(g2, p).reshape(x.data.shape),)

    return _make(p.reshape(x.data.shape), (x,), bwd, "softmax")


def gelu(x):
    """Exact-erf GELU: x * Phi(x)."""
    flat = np.ascontiguousarray(x.data.reshape(-1))
    y = K.gelu_fwd(flat)

    def bwd(g):
        gf = np.ascontiguousarray(g.reshape(-1))
        return (K.gelu_bwd(gf, flat).reshape(x.data.shape),)

    return _make(y.reshape(x.data.shape), (x,), bwd, "gelu")


def gather_rows(x, idx):
    """Select rows of a 2d tensor; backward scatter-adds into place."""
    if x.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2d tensor")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ShapeError("gather index out of range")
    data = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(data, (x,), bwd, "gather_rows")


def row_repeat(v, n):
    """Tile a (d,) vector into an (n, d) matrix; backward sums the rows."""
    if v.data.ndim != 1:
        raise ShapeError("row_repeat expects a 1d tensor")
    data = np.broadcast_to(v.data, (int(n), v.data.shape[0])).copy()

    def bwd(g):
        return (g.sum(axis=0),)

    return _make(data, (v,), bwd, "row_repeat")


def concat_rows(a, b):
    """Concatenate two 2d tensors along axis 0."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError("concat_rows expects 2d tensors with equal width")
    na = a.data.shape[0]
    data = np.concatenate([a.data, b.data], axis=0)

    def bwd(g):
        return g[:na], g[na:]

    return _make(data, (a, b), bwd, "concat_rows")


def cross_entropy(logits, labels):
    """Mean cross-entropy of (B, K) logits against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects (B, K) logits")
    labels = np.asarray(labels, dtype=np.intp)
    bsz = logits.data.shape[0]
    if labels.shape != (bsz,):
        raise ShapeError("labels must have shape (B,)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = (lse - z[np.arange(bsz), labels]).mean()

    def bwd(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(bsz), labels] -= 1.0
        return (p * (g / bsz),)

    return _make(np.asarray(nll, dtype=logits.dtype), (logits,), bwd, "cross_entropy")


def attention(q, k, v, heads):
    """Multi-head scaled dot-product attention.

    q: (L_q, d) or (B, L_q, d); k, v likewise with L_k rows. Per head the
    scale is 1/sqrt(d/heads); softmax runs over the key axis; heads are
    concatenated. The output projection is the caller's business.
    """
    squeeze = q.data.ndim == 2
    if squeeze:
        q, k, v = (reshape(t, (1,) + t.data.shape) for t in (q, k, v))
    b, lq, d = q.data.shape
    if d % heads:
        raise ShapeError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads
    lk = k.data.shape[1]

    def split(t, length):
        return transpose(reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    scores = mul(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(dh))
    probs = softmax(scores)
    out = matmul(probs, vh)  # (b, heads, lq, dh)
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, lq, d))
    if squeeze:
        out = reshape(out, (lq, d))
    return out
