"""Layer primitives with hand-written backward passes, plus Adam.

Every op is a ``*_forward`` returning ``(out, cache)`` and a ``*_backward``
taking the upstream gradient and that cache. Arrays are numpy; float32 is the
working precision and float64 is used for gradient checks.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels

LOG_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ConfigurationError(ValueError):
    """An op or model was configured inconsistently."""


class NumericError(ArithmeticError):
    """Non-finite or out-of-domain numeric input."""


class StateError(RuntimeError):
    """An op was called in the wrong lifecycle state."""


# When not None, every ReLU mask and max-pool choice is appended here so a
# caller can tell whether two evaluations share one linear region.
_pattern: list | None = None


@contextlib.contextmanager
def record_pattern():
    """Collect the piecewise-linear activation pattern of the enclosed forward passes."""
    global _pattern
    prev, _pattern = _pattern, []
    try:
        yield _pattern
    finally:
        _pattern = prev


def _record(mask: np.ndarray) -> None:
    if _pattern is not None:
        _pattern.append(np.packbits(np.asarray(mask, dtype=bool)).tobytes())


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")


# ---------------------------------------------------------------- linear

def linear_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[0] \
            or w.shape[1] != b.shape[0]:
        raise DimensionError(
            f"linear: input {x.shape} x weights {w.shape} + bias {b.shape} do not conform")
    return x @ w + b, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


# ---------------------------------------------------------- activations

def relu(x):
    _check_finite(x, "relu input")
    _record(x > 0)
    return np.maximum(x, 0)


def relu_backward(dy, y):
    """Gradient of relu given its *output* ``y``."""
    return dy * (y > 0)


def sigmoid(x):
    _check_finite(x, "sigmoid input")
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(dy, y):
    return dy * y * (1 - y)


def softmax(x, axis=-1):
    _check_finite(x, "softmax input")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(dy, y, axis=-1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


# ----------------------------------------------------------------- conv

def conv_output_shape(h: int, w: int, pool: bool, k: int = 3, stride: int = 2,
                      pad: int = 1) -> tuple[int, int]:
    ho = kernels.conv_out_size(h, k, stride, pad)
    wo = kernels.conv_out_size(w, k, stride, pad)
    if pool:
        ho, wo = ho // 2, wo // 2
    return ho, wo


def conv2d_block_forward(x, filters, bias, pool=True, stride=2, pad=1):
    """3x3 convolution (zero padding), ReLU, then optional 2x2 max pooling.

    ``filters`` is (F, C, 3, 3). Output is (B, F, Ho, Wo) with floor
    arithmetic for both the convolution and the pooling.
    """
    if x.ndim != 4 or filters.ndim != 4 or filters.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs filters {filters.shape}")
    F, C, k, _ = filters.shape
    B, _, H, W = x.shape
    if H + 2 * pad < k or W + 2 * pad < k:
        raise DimensionError(f"conv2d: input {x.shape} smaller than kernel {k}x{k}")
    Ho, Wo = conv_output_shape(H, W, False, k, stride, pad)
    if pool and (Ho < 2 or Wo < 2):
        raise DimensionError(f"conv2d: conv output {Ho}x{Wo} too small to pool (input {x.shape})")
    cols = kernels.im2col(x, k, stride, pad)
    wmat = filters.reshape(F, -1)
    z = cols @ wmat.T + bias                               # (B, Ho*Wo, F)
    _record(z > 0)
    a = np.maximum(z, 0)
    a = np.ascontiguousarray(a.transpose(0, 2, 1).reshape(B, F, Ho, Wo))
    arg = None
    out = a
    if pool:
        out, arg = kernels.maxpool2(a)
        if _pattern is not None:
            _pattern.append(arg.tobytes())
    return out, (x.shape, cols, filters, a, arg, stride, pad)


def conv2d_block_backward(dy, cache):
    x_shape, cols, filters, a, arg, stride, pad = cache
    F, C, k, _ = filters.shape
    B = x_shape[0]
    if arg is not None:
        da = kernels.maxpool2_backward(np.ascontiguousarray(dy), arg, a.shape)
    else:
        da = dy
    dz = (da * (a > 0)).reshape(B, F, -1).transpose(0, 2, 1)   # (B, Ho*Wo, F)
    dw = np.einsum("bpf,bpk->fk", dz, cols).reshape(filters.shape)
    db = dz.sum(axis=(0, 1))
    dcols = dz @ filters.reshape(F, -1)
    dx = kernels.col2im(dcols, x_shape, k, stride, pad)
    return dx, dw, db


# ------------------------------------------------------------ attention

def mha_forward(seq, heads, wq, bq, wk, bk, wv, bv, wo, bo):
    """Self-attention with learned Q/K/V/output projections (no residual)."""
    B, S, D = seq.shape
    if D % heads:
        raise ConfigurationError(f"model dim {D} not divisible by {heads} heads")
    if S < 1:
        raise DimensionError("attention needs at least one token")
    dh = D // heads
    x2 = seq.reshape(B * S, D)

    def split(t):
        return t.reshape(B, S, heads, dh).transpose(0, 2, 1, 3)   # (B, h, S, dh)

    q = split(x2 @ wq + bq)
    k = split(x2 @ wk + bk)
    v = split(x2 @ wv + bv)
    scale = 1.0 / np.sqrt(dh)
    att = softmax(np.einsum("bhsd,bhtd->bhst", q, k) * scale, axis=-1)
    ctx = np.einsum("bhst,bhtd->bhsd", att, v).transpose(0, 2, 1, 3).reshape(B * S, D)
    out = (ctx @ wo + bo).reshape(B, S, D)
    cache = (x2, q, k, v, att, ctx, wq, wk, wv, wo, scale, heads, seq.shape)
    return out, cache


def mha_backward(dout, cache):
    """Returns (dseq, grads) with grads keyed wq, bq, wk, bk, wv, bv, wo, bo."""
    x2, q, k, v, att, ctx, wq, wk, wv, wo, scale, heads, shape = cache
    B, S, D = shape
    dh = D // heads
    d2 = dout.reshape(B * S, D)
    g = {"wo": ctx.T @ d2, "bo": d2.sum(axis=0)}
    dctx = (d2 @ wo.T).reshape(B, S, heads, dh).transpose(0, 2, 1, 3)
    datt = np.einsum("bhsd,bhtd->bhst", dctx, v)
    dv = np.einsum("bhst,bhsd->bhtd", att, dctx)
    dscores = softmax_backward(datt, att, axis=-1) * scale
    dq = np.einsum("bhst,bhtd->bhsd", dscores, k)
    dk = np.einsum("bhst,bhsd->bhtd", dscores, q)

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B * S, D)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    g["wq"], g["bq"] = x2.T @ dq, dq.sum(axis=0)
    g["wk"], g["bk"] = x2.T @ dk, dk.sum(axis=0)
    g["wv"], g["bv"] = x2.T @ dv, dv.sum(axis=0)
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx.reshape(B, S, D), g


def attention_weights(seq, heads, wq, bq, wk, bk):
    """The (B, heads, S, S) attention matrix, for inspection and tests."""
    B, S, D = seq.shape
    dh = D // heads
    x2 = seq.reshape(B * S, D)
    q = (x2 @ wq + bq).reshape(B, S, heads, dh).transpose(0, 2, 1, 3)
    k = (x2 @ wk + bk).reshape(B, S, heads, dh).transpose(0, 2, 1, 3)
    return softmax(np.einsum("bhsd,bhtd->bhst", q, k) / np.sqrt(dh), axis=-1)


# ------------------------------------------------------- reparameterize

def reparameterize(mu, sigma, noise):
    if np.any(sigma <= 0):
        raise NumericError("reparameterize: sigma must be strictly positive")
    if not (mu.shape == sigma.shape == noise.shape):
        raise DimensionError(f"reparameterize: {mu.shape}, {sigma.shape}, {noise.shape}")
    return mu + sigma * noise


def reparameterize_backward(dz, noise):
    """(dmu, dsigma); the noise is a constant input."""
    return dz, dz * noise


# ----------------------------------------------------------------- Adam

@dataclass
class LayerParams:
    """Named parameter tensors with gradient accumulators and Adam moments."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray | None] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        self.values[name] = value
        self.grads[name] = None
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def accumulate(self, name: str, g: np.ndarray) -> None:
        if g.shape != self.values[name].shape:
            raise DimensionError(f"gradient for {name}: {g.shape} vs {self.values[name].shape}")
        cur = self.grads[name]
        g = g.astype(self.values[name].dtype, copy=False)
        self.grads[name] = g.copy() if cur is None else cur + g

    def zero_grad(self) -> None:
        for name, value in self.values.items():
            self.grads[name] = np.zeros_like(value)

    def clear_grad(self) -> None:
        for name in self.grads:
            self.grads[name] = None

    def astype(self, dtype) -> "LayerParams":
        out = LayerParams(step=self.step)
        for name, value in self.values.items():
            out.values[name] = value.astype(dtype)
            out.grads[name] = None
            out.m[name] = self.m[name].astype(dtype)
            out.v[name] = self.v[name].astype(dtype)
        return out


def adam_step(params: LayerParams, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8,
              names=None) -> LayerParams:
    """One bias-corrected Adam update in place; gradients are cleared afterwards.

    ``names`` restricts the update to a subset (parameters an ablation never
    touches keep their moments and values); every name updated must have a
    gradient.
    """
    names = params.names() if names is None else list(names)
    missing = [n for n in names if params.grads.get(n) is None]
    if missing:
        raise StateError(f"adam_step: no gradient for {missing[:5]}")
    params.step += 1
    t = params.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for n in names:
        g = params.grads[n]
        m = params.m[n]
        v = params.v[n]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params.values[n] -= step.astype(params.values[n].dtype, copy=False)
    params.clear_grad()
    return params


# ------------------------------------------------------ gradient checks

def numeric_grad(f: Callable[[], float], x: np.ndarray, idx=None, h=1e-3) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (mutated in place).

    ``idx`` is an iterable of flat indices; all entries when omitted.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.asarray(out)


def smooth_numeric_grad(f: Callable[[], float], x: np.ndarray, i: int, h=1e-3):
    """Central difference at flat index ``i``, or None when the stencil crosses a kink.

    A kink is any change of ReLU sign or max-pool winner between x-h, x and
    x+h; the finite difference is then not an estimate of the derivative.
    """
    flat = x.reshape(-1)
    old = flat[i]
    with record_pattern() as p0:
        f()
    flat[i] = old + h
    with record_pattern() as pp:
        fp = f()
    flat[i] = old - h
    with record_pattern() as pm:
        fm = f()
    flat[i] = old
    if not (p0 == pp == pm):
        return None
    return (fp - fm) / (2 * h)


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def gradcheck(f: Callable[[], float], x: np.ndarray, analytic: np.ndarray, n: int,
              rng: np.random.Generator, h=1e-3, floor=1e-6, max_tries=None) -> GradCheck:
    """Compare ``analytic`` (same shape as ``x``) with central differences at ``n``
    random coordinates that are differentiable over the whole stencil."""
    flat_a = np.asarray(analytic).reshape(-1)
    order = rng.permutation(x.size)[: max_tries or max(4 * n, n + 20)]
    errs, skipped = [], 0
    for i in order:
        if len(errs) >= n:
            break
        num = smooth_numeric_grad(f, x, int(i), h)
        if num is None:
            skipped += 1
            continue
        errs.append(max_relative_error(flat_a[i], num, floor))
    return GradCheck(max(errs) if errs else 0.0, len(errs), skipped)


def max_relative_error(analytic, numeric, floor=1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
