"""Minimal reverse-mode automatic differentiation on NumPy arrays.

A :class:`Tensor` wraps a float32/float64 array.  Operations on tensors
record a backward closure and references to their inputs whenever any input
has ``requires_grad`` set; :func:`backward` walks that record in reverse
topological order and accumulates gradients additively.  Gradients are
never cleared implicitly: callers zero them between optimization steps.

Conventions fixed here and relied on by the test oracles:

* training runs in float32, verification oracles in float64;
* nondifferentiable points (ReLU at 0, clamp at a bound) use subgradient 0;
* a tensor with ``requires_grad=False`` never accumulates a gradient.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """n-dimensional float array participating in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        # leaves get a zero gradient eagerly so "unreachable => zeros" holds
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op = "leaf"
        self.parents = ()
        self._backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def _ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def item(self):
        return float(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self.op!r})"

    # arithmetic sugar; the functional forms below do the real work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def node(data, op, parents, backward_fn):
    """Wrap an op result; the tape edge is recorded only if a parent needs it."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.op = op
    t.name = None
    t.requires_grad = any(p.requires_grad for p in parents)
    if t.requires_grad:
        t.parents = tuple(parents)
        t._backward_fn = backward_fn
    else:
        t.parents = ()
        t._backward_fn = None
    return t


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _check_same_dtype(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")


def _binary_operands(a, b, op):
    """Validate the equal-shape-or-scalar contract; returns (a, b, b_is_scalar)."""
    a = as_tensor(a)
    if isinstance(b, (int, float, np.floating, np.integer)):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype)), True
    b = as_tensor(b)
    _check_same_dtype(a, b, op)
    if a.data.shape == b.data.shape:
        return a, b, False
    if b.data.size == 1:
        return a, b, True
    if a.data.size == 1:
        bb, aa, _ = _binary_operands(b, a, op)  # normalize scalar to the right
        return aa, bb, True
    raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _reduce_to(grad, like):
    """Collapse a full-shape gradient onto a scalar operand's shape."""
    if grad.shape == like.shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(like.shape)


def add(a, b):
    a, b, _ = _binary_operands(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _reduce_to(g, a.data), _reduce_to(g, b.data)

    return node(out, "add", (a, b), bwd)


def sub(a, b):
    a, b, _ = _binary_operands(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return _reduce_to(g, a.data), _reduce_to(-g, b.data)

    return node(out, "sub", (a, b), bwd)


def mul(a, b):
    a, b, _ = _binary_operands(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        return _reduce_to(g * b.data, a.data), _reduce_to(g * a.data, b.data)

    return node(out, "mul", (a, b), bwd)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.data.dtype)

    def bwd(g):
        return (g * mask,)

    return node(out, "relu", (a,), bwd)


def clamp(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)  # subgradient 0 at the bounds

    def bwd(g):
        return (g * mask,)

    return node(out, "clamp", (a,), bwd)


def elementwise(op, a, b=None):
    """Dispatch by op name: add/sub/mul take two operands, relu one, clamp (lo, hi)."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "relu":
        return relu(a)
    if op == "clamp":
        lo, hi = b
        return clamp(a, lo, hi)
    raise ValueError(f"unknown elementwise op {op!r}")


def concat_channels(ts, axis=1):
    """Concatenate along the channel axis; all other extents must agree."""
    ts = [as_tensor(t) for t in ts]
    if not ts:
        raise ValueError("concat_channels: empty input list")
    first = ts[0]
    for t in ts[1:]:
        _check_same_dtype(first, t, "concat_channels")
        a, b = list(first.data.shape), list(t.data.shape)
        if len(a) != len(b):
            raise ValueError(f"concat_channels: rank mismatch {tuple(a)} vs {tuple(b)}")
        a[axis] = b[axis] = -1
        if a != b:
            raise ValueError(
                f"concat_channels: non-channel extents differ: {first.data.shape} vs {t.data.shape}"
            )
    out = np.concatenate([t.data for t in ts], axis=axis)
    widths = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return node(out, "concat", tuple(ts), bwd)


def sum_all(a):
    a = as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        return (np.full(a.data.shape, g, dtype=a.data.dtype),)

    return node(out, "sum", (a,), bwd)


def mean_all(a):
    a = as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bwd(g):
        return (np.full(a.data.shape, g / n, dtype=a.data.dtype),)

    return node(out, "mean", (a,), bwd)


def _topo_order(root):
    """Iterative topological order over the recorded graph (graphs get deep)."""
    order = []
    seen = {id(root)}
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        stack.append((t, True))
        for p in t.parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(tensor) into every reachable requires_grad tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any requires_grad tensor")
    order = _topo_order(loss)
    loss._ensure_grad()
    loss.grad = loss.grad + np.ones_like(loss.data)
    for t in reversed(order):
        if t._backward_fn is None:
            continue
        grads = t._backward_fn(t.grad)
        for parent, g in zip(t.parents, grads):
            if g is not None and parent.requires_grad:
                parent._ensure_grad()
                parent.grad += g.reshape(parent.data.shape)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def finite_diff_check(f, inputs, h=1e-5):
    """Max relative error between analytic gradients and central differences.

    ``f`` maps the given tensors to a scalar tensor.  All inputs must be
    float64; each coordinate of each input is perturbed by ±h.  The relative
    error is |analytic - numeric| / max(1, |numeric|), maximized over all
    coordinates.  Non-finite values are reported with their coordinates.
    """
    inputs = list(inputs)
    for i, t in enumerate(inputs):
        if t.data.dtype != np.float64:
            raise TypeError(f"finite_diff_check: input {i} must be float64, got {t.data.dtype}")
        t.requires_grad = True
        t._ensure_grad()

    zero_grads(inputs)
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError("finite_diff_check: f must be scalar-valued")
    backward(out)
    analytic = [t.grad.copy() for t in inputs]

    bad = []
    max_err = 0.0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        ana = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi = float(f(*inputs).data)
            flat[j] = orig - h
            lo = float(f(*inputs).data)
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * h)
            if not (np.isfinite(numeric) and np.isfinite(ana[j])):
                bad.append((i, j, float(ana[j]), numeric))
                continue
            err = abs(ana[j] - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    if bad:
        detail = ", ".join(f"input {i} coord {j}: analytic={a} numeric={n}" for i, j, a, n in bad)
        raise FloatingPointError(f"finite_diff_check: non-finite values at {detail}")
    return max_err
