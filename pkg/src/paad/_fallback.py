"""Pure numpy versions of the hot kernels.

Each function here has a twin in ``_kernels.pyx`` with the same signature and
bit-compatible output; ``paad.kernels`` picks one at import time.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, Ho*Wo, C*k*k) patch matrix."""
    B, C, H, W = x.shape
    Ho = conv_out_size(H, k, stride, pad)
    Wo = conv_out_size(W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :Ho, :Wo]
    # (B, C, Ho, Wo, k, k) -> (B, Ho, Wo, C, k, k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, C * k * k)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = x_shape
    Ho = conv_out_size(H, k, stride, pad)
    Wo = conv_out_size(W, k, stride, pad)
    c = cols.reshape(B, Ho, Wo, C, k, k)
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                c[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dxp[:, :, pad:pad + H, pad:pad + W]


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 / stride 2 max pooling with floor semantics.

    Returns the pooled map and the winning position (0..3, row-major within the
    window, first maximum wins).
    """
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    win = x[:, :, :2 * Ho, :2 * Wo].reshape(B, C, Ho, 2, Wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    arg = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(dout: np.ndarray, arg: np.ndarray, x_shape: tuple) -> np.ndarray:
    B, C, H, W = x_shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    onehot = (arg[..., None] == np.arange(4, dtype=np.int8)).astype(dout.dtype)
    g = (onehot * dout[..., None]).reshape(B, C, Ho, Wo, 2, 2)
    g = g.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * Ho, 2 * Wo)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, :2 * Ho, :2 * Wo] = g
    return dx


def ray_cast_core(ux: np.ndarray, uy: np.ndarray, dx: np.ndarray, dy: np.ndarray,
                  r: np.ndarray, max_range: float) -> np.ndarray:
    """Distance along each unit beam (ux, uy) to the first circle it enters.

    Circles are given relative to the beam origin as (dx, dy, r). Beams that
    start inside a circle report ``1e-3``; beams that hit nothing report
    ``max_range``.
    """
    out = np.full(ux.shape[0], max_range, dtype=np.float64)
    if dx.size == 0:
        return out
    proj = ux[:, None] * dx + uy[:, None] * dy
    d2 = dx * dx + dy * dy
    disc = proj * proj - (d2 - r * r)
    with np.errstate(invalid="ignore"):
        t = proj - np.sqrt(disc)
    t = np.where((disc >= 0) & (t > 0), t, np.inf)
    t = np.where(d2 <= r * r, 1e-3, t)
    return np.minimum(out, t.min(axis=1))
