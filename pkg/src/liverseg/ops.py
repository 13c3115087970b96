"""Differentiable network operators: convolution, pooling, batch
normalization, linear upsampling, channel softmax and the weighted
cross-entropy loss.

Shape policy shared by conv and pooling: every spatial output extent is
``ceil(in / stride)``.  Odd kernels get symmetric padding of ``k // 2``;
even kernels get the minimal (right-biased) padding that reaches the same
output extent.  This is the only policy that reproduces all stage extents
of the canonical architectures (224 -> 112 at stride 2, 56 -> 28 for the
2x2 pool, and so on).

Tensors are laid out channels-first: (N, C, H, W) in 2D and (N, C, H, W, D)
in 3D, with D the through-plane (z) axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from liverseg import backend
from liverseg.autodiff import Tensor, as_tensor, node

LOG_FLOOR = 1e-12


def ceil_div(n, s):
    return -(-n // s)


def _half_padding(extent, kernel, stride):
    """(lo, hi) padding per the ceil-output policy."""
    if kernel % 2 == 1:
        p = kernel // 2
        return p, p
    total = max((ceil_div(extent, stride) - 1) * stride + kernel - extent, 0)
    return total // 2, total - total // 2


def _pad_spatial(x, extents, kernel, stride, value=0.0):
    pads = [(0, 0), (0, 0)] + [
        _half_padding(n, k, s) for n, k, s in zip(extents, kernel, stride)
    ]
    if all(p == (0, 0) for p in pads):
        return x, pads
    return np.pad(x, pads, constant_values=value), pads


def _crop_spatial(xpad, pads, extents):
    sl = [slice(None), slice(None)]
    for (lo, _), n in zip(pads[2:], extents):
        sl.append(slice(lo, lo + n))
    return xpad[tuple(sl)]


def _im2col(xpad, kernel, stride, out_spatial):
    if len(kernel) == 2:
        return backend.im2col2d(xpad, kernel, stride, out_spatial)
    return backend.im2col3d(xpad, kernel, stride, out_spatial)


def _col2im(cols, pad_shape, kernel, stride, out_spatial):
    if len(kernel) == 2:
        return backend.col2im2d(cols, pad_shape, kernel, stride, out_spatial)
    return backend.col2im3d(cols, pad_shape, kernel, stride, out_spatial)


@dataclass(frozen=True)
class ConvSpec:
    """Kernel geometry of one convolution; padding is derived, not stored."""

    dims: int
    kernel: tuple
    stride: tuple
    out_channels: int

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError(f"ConvSpec: dims must be 2 or 3, got {self.dims}")
        if len(self.kernel) != self.dims or len(self.stride) != self.dims:
            raise ValueError(
                f"ConvSpec: kernel {self.kernel} / stride {self.stride} must have {self.dims} axes"
            )

    def output_extents(self, in_extents):
        return tuple(ceil_div(n, s) for n, s in zip(in_extents, self.stride))


def conv(x, spec, w, b):
    """Convolve x with weights w (F, C, *kernel) and bias b (F,)."""
    x = as_tensor(x)
    w = as_tensor(w)
    b = as_tensor(b)
    if x.data.ndim != spec.dims + 2:
        raise ValueError(f"conv: expected {spec.dims + 2}-d input, got shape {x.data.shape}")
    n, c = x.data.shape[:2]
    if w.data.shape != (spec.out_channels, c) + tuple(spec.kernel):
        raise ValueError(
            f"conv: weight shape {w.data.shape} does not match input channels {c} "
            f"and spec {(spec.out_channels,) + tuple(spec.kernel)}"
        )
    extents = x.data.shape[2:]
    out_sp = spec.output_extents(extents)
    xpad, pads = _pad_spatial(x.data, extents, spec.kernel, spec.stride)
    cols = _im2col(xpad, spec.kernel, spec.stride, out_sp)
    k = int(np.prod(spec.kernel))
    l = int(np.prod(out_sp))
    colsm = cols.reshape(n, c * k, l)
    w2 = w.data.reshape(spec.out_channels, c * k)
    out = np.matmul(w2, colsm) + b.data[:, None]
    out = out.reshape((n, spec.out_channels) + out_sp)
    pad_shape = xpad.shape

    def bwd(g):
        gm = g.reshape(n, spec.out_channels, l)
        dw = np.matmul(gm, colsm.transpose(0, 2, 1)).sum(axis=0)
        db = gm.sum(axis=(0, 2))
        dcols = np.matmul(w2.T, gm).reshape(n, c, k, l)
        dxpad = _col2im(dcols, pad_shape, spec.kernel, spec.stride, out_sp)
        dx = _crop_spatial(dxpad, pads, extents)
        return dx, dw.reshape(w.data.shape), db

    return node(out, f"conv{spec.dims}d", (x, w, b), bwd)


def pool(x, kind, window, stride):
    """Max or average pooling with the shared ceil-output policy.

    Average pooling divides by the number of in-bounds cells, so padded
    positions never dilute the mean.  Max pooling breaks ties by the first
    window offset in raster order.
    """
    x = as_tensor(x)
    dims = x.data.ndim - 2
    window = tuple(window)
    stride = tuple(stride)
    if len(window) != dims or len(stride) != dims:
        raise ValueError(f"pool: window {window} / stride {stride} must have {dims} axes")
    extents = x.data.shape[2:]
    for n_ax, k_ax, s_ax in zip(extents, window, stride):
        lo, hi = _half_padding(n_ax, k_ax, s_ax)
        if k_ax > n_ax + lo + hi:
            raise ValueError(f"pool: window {window} exceeds padded extent of input {extents}")
    out_sp = tuple(ceil_div(n_ax, s_ax) for n_ax, s_ax in zip(extents, stride))
    n, c = x.data.shape[:2]
    k = int(np.prod(window))
    l = int(np.prod(out_sp))

    if kind == "max":
        fill = -np.inf
    elif kind == "avg":
        fill = 0.0
    else:
        raise ValueError(f"pool: kind must be 'max' or 'avg', got {kind!r}")

    xpad, pads = _pad_spatial(x.data, extents, window, stride, value=fill)
    pad_shape = xpad.shape
    cols = _im2col(xpad, window, stride, out_sp)

    if kind == "max":
        idx = cols.argmax(axis=2)  # first max wins on ties
        out = np.take_along_axis(cols, idx[:, :, None, :], axis=2)[:, :, 0, :]

        def bwd(g):
            dcols = np.zeros_like(cols)
            np.put_along_axis(dcols, idx[:, :, None, :], g.reshape(n, c, 1, l), axis=2)
            dxpad = _col2im(dcols, pad_shape, window, stride, out_sp)
            return (_crop_spatial(dxpad, pads, extents),)

    else:
        ones = np.ones((1, 1) + extents, dtype=x.data.dtype)
        opad, _ = _pad_spatial(ones, extents, window, stride, value=0.0)
        valid = _im2col(opad, window, stride, out_sp)  # (1, 1, K, L) of 0/1
        counts = valid.sum(axis=2)
        out = cols.sum(axis=2) / counts

        def bwd(g):
            dcols = valid * (g.reshape(n, c, 1, l) / counts[:, :, None, :])
            dxpad = _col2im(dcols, pad_shape, window, stride, out_sp)
            return (_crop_spatial(dxpad, pads, extents),)

    return node(out.reshape((n, c) + out_sp), f"{kind}pool", (x,), bwd)


def max_pool(x, window, stride):
    return pool(x, "max", window, stride)


def avg_pool(x, window, stride):
    return pool(x, "avg", window, stride)


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one channel axis."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.99

    @classmethod
    def create(cls, channels, dtype=np.float32, epsilon=1e-5, momentum=0.99):
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            epsilon=epsilon,
            momentum=momentum,
        )


def batch_norm(x, state, train):
    """Normalize per channel; batch statistics in train mode, running in eval."""
    x = as_tensor(x)
    c = x.data.shape[1]
    if state.gamma.data.shape != (c,):
        raise ValueError(f"batch_norm: state has {state.gamma.data.shape[0]} channels, input has {c}")
    axes = (0,) + tuple(range(2, x.data.ndim))
    shape = (1, c) + (1,) * (x.data.ndim - 2)
    gamma, beta = state.gamma, state.beta

    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased, matching the normalization
        state.running_mean[...] = state.momentum * state.running_mean + (1 - state.momentum) * mu
        state.running_var[...] = state.momentum * state.running_var + (1 - state.momentum) * var
        inv = 1.0 / np.sqrt(var + state.epsilon)
        xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
        out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
        m = x.data.size // c

        def bwd(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data.reshape(shape)
            dx = (
                dxhat
                - dxhat.mean(axis=axes).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape) / m
            ) * inv.reshape(shape)
            return dx.astype(x.data.dtype), dgamma, dbeta

    else:
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x.data - state.running_mean.reshape(shape)) * inv.reshape(shape)
        out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def bwd(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dx = g * (gamma.data * inv).reshape(shape)
            return dx.astype(x.data.dtype), dgamma, dbeta

    return node(out.astype(x.data.dtype), "batch_norm", (x, gamma, beta), bwd)


_interp_cache = {}


def _interp_matrix(n_in, factor, dtype):
    """(n_in*factor, n_in) linear interpolation matrix, endpoints aligned."""
    key = (n_in, factor, np.dtype(dtype).name)
    m = _interp_cache.get(key)
    if m is not None:
        return m
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.minimum(src.astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w1 = src - i0
        rows = np.arange(n_out)
        m[rows, i0] += 1.0 - w1
        m[rows, i1] += w1
    m = m.astype(dtype)
    _interp_cache[key] = m
    return m


def _apply_axis(a, mat, axis):
    moved = np.moveaxis(a, axis, -1)
    return np.moveaxis(moved @ mat.T, -1, axis)


def upsample(x, factors, mode=None):
    """Linear upsampling by integer factors; output endpoints coincide with
    input endpoints, so constant fields stay constant."""
    x = as_tensor(x)
    dims = x.data.ndim - 2
    factors = tuple(int(f) for f in factors)
    if len(factors) != dims:
        raise ValueError(f"upsample: {dims} spatial axes but factors {factors}")
    if any(f < 1 for f in factors):
        raise ValueError(f"upsample: factors must be positive integers, got {factors}")
    if mode is not None and mode != ("bilinear" if dims == 2 else "trilinear"):
        raise ValueError(f"upsample: mode {mode!r} does not match a {dims}d input")
    mats = [
        _interp_matrix(x.data.shape[2 + a], factors[a], x.data.dtype) for a in range(dims)
    ]
    out = x.data
    for a, m in enumerate(mats):
        if factors[a] != 1:
            out = _apply_axis(out, m, 2 + a)

    def bwd(g):
        dx = g
        for a, m in enumerate(mats):
            if factors[a] != 1:
                dx = _apply_axis(dx, m.T, 2 + a)
        return (dx,)

    return node(np.ascontiguousarray(out), "upsample", (x,), bwd)


def softmax_channels(x, axis=1):
    """Numerically stable softmax along the channel axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return node(p, "softmax", (x,), bwd)


@dataclass(frozen=True)
class LossWeights:
    """Per-class weights for the cross-entropy loss; all must be positive."""

    background: float = 1.0
    liver: float = 3.0
    tumor: float = 10.0

    def __post_init__(self):
        if min(self.background, self.liver, self.tumor) <= 0:
            raise ValueError(f"LossWeights must be positive, got {self}")

    def as_array(self, dtype=np.float64):
        return np.asarray([self.background, self.liver, self.tumor], dtype=dtype)


def weighted_cross_entropy(probs, labels, weights):
    """Negative weighted mean log-probability of the true class.

    ``probs`` holds per-voxel class probabilities (channel axis 1), ``labels``
    integer classes of matching spatial shape.  The log argument is floored
    at 1e-12.  Normalization is by voxel count, so doubling one voxel's class
    weight doubles exactly that voxel's contribution.
    """
    probs = as_tensor(probs)
    labels = np.asarray(labels)
    num_classes = probs.data.shape[1]
    expected = probs.data.shape[:1] + probs.data.shape[2:]
    if labels.shape != expected:
        raise ValueError(f"weighted_cross_entropy: labels shape {labels.shape} != {expected}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"weighted_cross_entropy: labels outside [0, {num_classes - 1}]: "
            f"found range [{labels.min()}, {labels.max()}]"
        )
    if isinstance(weights, LossWeights):
        warr = weights.as_array(probs.data.dtype)
    else:
        warr = np.asarray(weights, dtype=probs.data.dtype)
    if warr.shape != (num_classes,):
        raise ValueError(f"weighted_cross_entropy: need {num_classes} class weights, got {warr.shape}")
    if warr.min() <= 0:
        raise ValueError("weighted_cross_entropy: class weights must be positive")

    idx = np.expand_dims(labels, axis=1)
    p_true = np.take_along_axis(probs.data, idx, axis=1)
    wv = warr[labels][:, None]
    n = labels.size
    floored = np.maximum(p_true, LOG_FLOOR)
    out = np.asarray(-(wv * np.log(floored)).sum() / n, dtype=probs.data.dtype)

    def bwd(g):
        dtrue = np.where(p_true > LOG_FLOOR, -wv / (floored * n), 0.0) * g
        dp = np.zeros_like(probs.data)
        np.put_along_axis(dp, idx, dtrue.astype(probs.data.dtype), axis=1)
        return (dp,)

    return node(out, "weighted_cross_entropy", (probs,), bwd)
