"""Kernel backend selection.

The compiled Cython extension is preferred when it imported successfully;
otherwise the NumPy reference implementation is used.  Both expose the same
four functions and produce identical results (the test suite asserts this).
Set ``LIVERSEG_KERNELS=reference`` or ``=compiled`` to force a choice, or
call :func:`use` at runtime (the benchmark does).
"""

import os

import numpy as np

from liverseg.backend import reference

try:
    from liverseg.backend import _fastcore
except ImportError:
    _fastcore = None


def _as_contig(a):
    if a.dtype not in (np.float32, np.float64):
        raise TypeError(f"kernel backend supports float32/float64, got {a.dtype}")
    return np.ascontiguousarray(a)


class _Compiled:
    """Adapter giving the raw extension the same signatures as reference.py."""

    @staticmethod
    def im2col2d(xpad, kernel, stride, out_spatial):
        xpad = _as_contig(xpad)
        n, c = xpad.shape[:2]
        (kh, kw), (oh, ow) = kernel, out_spatial
        cols = np.empty((n, c, kh * kw, oh * ow), dtype=xpad.dtype)
        _fastcore.im2col2d(xpad, kh, kw, stride[0], stride[1], oh, ow, cols)
        return cols

    @staticmethod
    def col2im2d(cols, pad_shape, kernel, stride, out_spatial):
        cols = _as_contig(cols)
        out = np.zeros(pad_shape, dtype=cols.dtype)
        (kh, kw), (oh, ow) = kernel, out_spatial
        _fastcore.col2im2d(cols, out, kh, kw, stride[0], stride[1], oh, ow)
        return out

    @staticmethod
    def im2col3d(xpad, kernel, stride, out_spatial):
        xpad = _as_contig(xpad)
        n, c = xpad.shape[:2]
        (kh, kw, kd), (oh, ow, od) = kernel, out_spatial
        cols = np.empty((n, c, kh * kw * kd, oh * ow * od), dtype=xpad.dtype)
        _fastcore.im2col3d(xpad, kh, kw, kd, stride[0], stride[1], stride[2], oh, ow, od, cols)
        return cols

    @staticmethod
    def col2im3d(cols, pad_shape, kernel, stride, out_spatial):
        cols = _as_contig(cols)
        out = np.zeros(pad_shape, dtype=cols.dtype)
        (kh, kw, kd), (oh, ow, od) = kernel, out_spatial
        _fastcore.col2im3d(cols, out, kh, kw, kd, stride[0], stride[1], stride[2], oh, ow, od)
        return out


_BACKENDS = {"reference": reference}
if _fastcore is not None:
    _BACKENDS["compiled"] = _Compiled

_active_name = None
_active = None


def use(name):
    """Select the kernel backend by name ('compiled' or 'reference')."""
    global _active_name, _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {sorted(_BACKENDS)}")
    _active_name = name
    _active = _BACKENDS[name]


def active_name():
    return _active_name


def available():
    return sorted(_BACKENDS)


_env = os.environ.get("LIVERSEG_KERNELS", "").strip().lower()
if _env:
    use(_env)
else:
    use("compiled" if _fastcore is not None else "reference")


def im2col2d(xpad, kernel, stride, out_spatial):
    return _active.im2col2d(xpad, kernel, stride, out_spatial)


def col2im2d(cols, pad_shape, kernel, stride, out_spatial):
    return _active.col2im2d(cols, pad_shape, kernel, stride, out_spatial)


def im2col3d(xpad, kernel, stride, out_spatial):
    return _active.im2col3d(xpad, kernel, stride, out_spatial)


def col2im3d(cols, pad_shape, kernel, stride, out_spatial):
    return _active.col2im3d(cols, pad_shape, kernel, stride, out_spatial)
