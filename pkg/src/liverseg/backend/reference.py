"""NumPy fallback for the patch gather/scatter kernels.

These are the hot inner loops of convolution and pooling: ``im2col`` turns
the padded input into a (batch, channels, window, position) matrix so the
convolution itself becomes one BLAS matmul, and ``col2im`` is its scatter
adjoint used by the backward pass.  The loops here run once per kernel
offset and slice with strides, so the heavy lifting stays vectorized.
"""

import numpy as np


def im2col2d(xpad, kernel, stride, out_spatial):
    """Gather 2D windows: (N,C,Hp,Wp) -> (N, C, kh*kw, oh*ow)."""
    n, c, _, _ = xpad.shape
    kh, kw = kernel
    sh, sw = stride
    oh, ow = out_spatial
    cols = np.empty((n, c, kh * kw, oh * ow), dtype=xpad.dtype)
    view = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            view[:, :, i, j] = xpad[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw]
    return cols


def col2im2d(cols, pad_shape, kernel, stride, out_spatial):
    """Scatter-add adjoint of :func:`im2col2d`; returns a (N,C,Hp,Wp) array."""
    n, c, _, _ = pad_shape
    kh, kw = kernel
    sh, sw = stride
    oh, ow = out_spatial
    out = np.zeros(pad_shape, dtype=cols.dtype)
    view = cols.reshape(n, c, kh, kw, oh, ow)
    # slices for a fixed offset never overlap, so += is race-free
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw] += view[:, :, i, j]
    return out


def im2col3d(xpad, kernel, stride, out_spatial):
    """Gather 3D windows: (N,C,Hp,Wp,Dp) -> (N, C, kh*kw*kd, oh*ow*od)."""
    n, c = xpad.shape[:2]
    kh, kw, kd = kernel
    sh, sw, sd = stride
    oh, ow, od = out_spatial
    cols = np.empty((n, c, kh * kw * kd, oh * ow * od), dtype=xpad.dtype)
    view = cols.reshape(n, c, kh, kw, kd, oh, ow, od)
    for i in range(kh):
        for j in range(kw):
            for k in range(kd):
                view[:, :, i, j, k] = xpad[
                    :,
                    :,
                    i : i + oh * sh : sh,
                    j : j + ow * sw : sw,
                    k : k + od * sd : sd,
                ]
    return cols


def col2im3d(cols, pad_shape, kernel, stride, out_spatial):
    """Scatter-add adjoint of :func:`im2col3d`."""
    n, c = pad_shape[:2]
    kh, kw, kd = kernel
    sh, sw, sd = stride
    oh, ow, od = out_spatial
    out = np.zeros(pad_shape, dtype=cols.dtype)
    view = cols.reshape(n, c, kh, kw, kd, oh, ow, od)
    for i in range(kh):
        for j in range(kw):
            for k in range(kd):
                out[
                    :,
                    :,
                    i : i + oh * sh : sh,
                    j : j + ow * sw : sw,
                    k : k + od * sd : sd,
                ] += view[:, :, i, j, k]
    return out
