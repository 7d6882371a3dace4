"""Hot-loop kernels with a compiled backend and a numpy fallback.

The Cython extension ``paad._kernels`` is used when it was built; otherwise,
or when ``PAAD_PURE_PYTHON=1`` is set, the numpy versions are used. Both
produce identical results. ``BACKEND`` names the active one.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback

try:
    if os.environ.get("PAAD_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("compiled kernels disabled by PAAD_PURE_PYTHON")
    from . import _kernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _fallback
    BACKEND = "numpy"

conv_out_size = _fallback.conv_out_size


def backend_module(name: str | None = None):
    """Return the kernel module for ``name`` ('cython' or 'numpy'), default active."""
    if name is None:
        return _impl
    if name == "numpy":
        return _fallback
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def im2col(x, k, stride, pad):
    return _impl.im2col(x, k, stride, pad)


def col2im(cols, x_shape, k, stride, pad):
    return _impl.col2im(cols, tuple(int(s) for s in x_shape), k, stride, pad)


def maxpool2(x):
    return _impl.maxpool2(x)


def maxpool2_backward(dout, arg, x_shape):
    return _impl.maxpool2_backward(dout, arg, tuple(int(s) for s in x_shape))


def ray_cast(ox: float, oy: float, angles: np.ndarray, circles: np.ndarray,
             max_range: float, impl=None) -> np.ndarray:
    """Range along each beam from (ox, oy) to the nearest circle, capped at max_range.

    ``circles`` is an (m, 3) array of (cx, cy, radius). Circles farther than
    ``max_range`` are culled before the per-beam sweep.
    """
    impl = impl or _impl
    angles = np.asarray(angles, dtype=np.float64)
    ux = np.ascontiguousarray(np.cos(angles))
    uy = np.ascontiguousarray(np.sin(angles))
    c = np.asarray(circles, dtype=np.float64).reshape(-1, 3)
    dx = c[:, 0] - ox
    dy = c[:, 1] - oy
    keep = np.hypot(dx, dy) - c[:, 2] < max_range
    return impl.ray_cast_core(ux, uy, np.ascontiguousarray(dx[keep]),
                              np.ascontiguousarray(dy[keep]),
                              np.ascontiguousarray(c[keep, 2]), float(max_range))
