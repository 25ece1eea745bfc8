"""Dense tensors and reverse-mode automatic differentiation on an explicit tape.

Tensors wrap row-major numpy arrays (float32 by default, float64 for
verification runs). Ops executed inside a ``with Tape():`` block are
recorded in execution order; ``backward`` walks the tape in reverse and
populates ``.grad`` on every tracked tensor it reaches.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes violate an op contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, (np.ndarray, np.generic)) and dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # arithmetic sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Execution-ordered op record; single-owner, not shared across threads."""

    def __init__(self):
        self._records: list[tuple[Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def record(self, out: Tensor, backward_fn: Callable) -> None:
        self._records.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def reset(self) -> None:
        self._records.clear()


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _result(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap op output; record on the active tape when any parent is tracked."""
    tracked = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=tracked)
    tape = _active_tape()
    if tracked and tape is not None:
        tape.record(out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` for every tracked tensor reachable from ``loss``.

    The tape is reset afterwards. ``params``, when given, are guaranteed a
    gradient buffer (zeros if disconnected from the loss).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    owned: set[int] = {id(loss)}

    def accum(t: Tensor, g: np.ndarray) -> None:
        # copy-on-write: most tensors have one consumer, so store the incoming
        # array (possibly a view) and only copy if a second contribution lands
        if not t.requires_grad:
            return
        key = id(t)
        cur = grads.get(key)
        if cur is None:
            grads[key] = g
            touched[key] = t
        else:
            if key not in owned:
                cur = np.array(cur, dtype=t.data.dtype)
                grads[key] = cur
                owned.add(key)
            cur += g

    for out, backward_fn in reversed(tape._records):
        g = grads.get(id(out))
        if g is None:
            continue
        backward_fn(g, accum)
    for key, t in touched.items():
        g = grads[key]
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    if params is not None:
        for p in params:
            if p.grad is None or id(p) not in touched:
                p.grad = np.zeros_like(p.data)
    tape.reset()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g, accum):
        if a.requires_grad:
            accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accum(b, _unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g, accum):
        if a.requires_grad:
            accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accum(b, _unbroadcast(-g, b.data.shape))

    return _result(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g, accum):
        if a.requires_grad:
            accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def bwd(g, accum):
        accum(a, g * s)

    return _result(a.data * np.array(s, dtype=a.data.dtype), (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g, accum):
        accum(a, g / a.data)

    return _result(np.log(a.data), (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def bwd(g, accum):
        accum(a, g * (a.data > 0))

    return _result(out, (a,), bwd)


def gelu(a) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def bwd(g, accum):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        accum(a, (g * (cdf + a.data * pdf)).astype(a.data.dtype, copy=False))

    return _result((a.data * cdf).astype(a.data.dtype, copy=False), (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def bwd(g, accum):
        accum(a, g.reshape(a.data.shape))

    return _result(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(ax % a.data.ndim for ax in axes)
    inverse = np.argsort(axes)

    def bwd(g, accum):
        accum(a, g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), bwd)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def bwd(g, accum):
        accum(a, _unbroadcast(g, a.data.shape))

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, accum):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            accum(p, piece)

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def take_rows(a, indices) -> Tensor:
    """Gather rows of a 2D tensor; backward scatter-adds."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows expects a 2D tensor, got shape {a.data.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows expects 1D indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row index out of range [0, {a.data.shape[0]})")

    def bwd(g, accum):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        accum(a, buf)

    return _result(a.data[idx], (a,), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward pads with zeros."""
    a = as_tensor(a)
    axis = axis % a.data.ndim
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g, accum):
        buf = np.zeros_like(a.data)
        buf[sl] = g
        accum(a, buf)

    return _result(a.data[sl].copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bwd(g, accum):
        gg = g if axis is None or keepdims else np.expand_dims(g, axis)
        accum(a, np.broadcast_to(gg, a.data.shape))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g, accum):
        gg = g if axis is None or keepdims else np.expand_dims(g, axis)
        accum(a, np.broadcast_to(gg / n, a.data.shape))

    return _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {ad.shape} x {bd.shape}")
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        if not (ad.ndim == 2 and bd.ndim == 2):
            raise ShapeError(f"matmul batch extents disagree: {ad.shape} x {bd.shape}")

    def bwd(g, accum):
        if a.requires_grad:
            accum(a, g @ bd.swapaxes(-1, -2))
        if b.requires_grad:
            accum(b, ad.swapaxes(-1, -2) @ g)

    return _result(ad @ bd, (a, b), bwd)


# ---------------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, accum):
        dot = (g * s).sum(axis=axis, keepdims=True)
        accum(a, s * (g - dot))

    return _result(s, (a,), bwd)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def bwd(g, accum):
        reduce_axes = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            accum(gamma, (g * xhat).sum(axis=reduce_axes))
        if beta.requires_grad:
            accum(beta, g.sum(axis=reduce_axes))
        if a.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            accum(a, ((gx - m1 - xhat * m2) * inv).astype(a.data.dtype, copy=False))

    out = xhat * gamma.data + beta.data
    return _result(out.astype(a.data.dtype, copy=False), (a, gamma, beta), bwd)


def cross_entropy_from_logits(logits, targets, label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-softmax of the target entries; max-shift stabilized.

    With label smoothing eps, the target distribution becomes
    (1-eps) * onehot + eps / K.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2D logits, got shape {logits.data.shape}")
    t = np.asarray(targets, dtype=np.intp)
    n, k = logits.data.shape
    if t.shape != (n,):
        raise ShapeError(f"targets must have shape ({n},), got {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise IndexError(f"target class out of range [0, {k})")
    if not 0 <= label_smoothing < 1:
        raise ValueError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    eps = label_smoothing
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_row = lse - (1.0 - eps) * shifted[np.arange(n), t] - eps * shifted.mean(axis=1)
    probs = None

    def bwd(g, accum):
        nonlocal probs
        if probs is None:
            e = np.exp(shifted)
            probs = e / e.sum(axis=1, keepdims=True)
        gl = probs - eps / k
        gl[np.arange(n), t] -= 1.0 - eps
        accum(logits, gl * (g / n))

    return _result(np.asarray(per_row.mean(), dtype=logits.data.dtype), (logits,), bwd)


# ---------------------------------------------------------------------------
# convolution / resampling
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    b, h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (b, oh, ow, kh, kw, c), (s0, s1 * stride, s2 * stride, s1, s2, s3)
    )
    return np.ascontiguousarray(view).reshape(b * oh * ow, kh * kw * c)


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution on NHWC input with (kh, kw, cin, cout) kernels."""
    x, w = as_tensor(x), as_tensor(w)
    bias = as_tensor(bias) if bias is not None else None
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input/kernel, got {x.data.shape} and {w.data.shape}")
    kh, kw, cin, cout = w.data.shape
    if x.data.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    b, hp, wp, _ = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def bwd(g, accum):
        gflat = g.reshape(b * oh * ow, cout)
        if w.requires_grad:
            accum(w, (cols.T @ gflat).reshape(w.data.shape))
        if bias is not None and bias.requires_grad:
            accum(bias, gflat.sum(axis=0))
        if x.requires_grad:
            dcols = (gflat @ wmat.T).reshape(b, oh, ow, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :] += dcols[
                        :, :, :, i, j, :
                    ]
            if padding:
                dxp = dxp[:, padding:-padding, padding:-padding, :]
            accum(x, dxp)

    return _result(out.reshape(b, oh, ow, cout), parents, bwd)


def _axis_interp(src_len: int, dst_len: int):
    """Half-pixel-center linear interpolation indices/weights for one axis."""
    pos = (np.arange(dst_len) + 0.5) * (src_len / dst_len) - 0.5
    lo = np.floor(pos).astype(np.intp)
    frac = pos - lo
    lo0 = np.clip(lo, 0, src_len - 1)
    lo1 = np.clip(lo + 1, 0, src_len - 1)
    return lo0, lo1, frac


def _bilinear_matrix(h: int, w: int, out_h: int, out_w: int, dtype) -> np.ndarray:
    i0, i1, fy = _axis_interp(h, out_h)
    j0, j1, fx = _axis_interp(w, out_w)
    m = np.zeros((out_h * out_w, h * w), dtype=np.float64)
    rows = np.arange(out_h * out_w)
    ii0 = np.repeat(i0, out_w)
    ii1 = np.repeat(i1, out_w)
    ffy = np.repeat(fy, out_w)
    jj0 = np.tile(j0, out_h)
    jj1 = np.tile(j1, out_h)
    ffx = np.tile(fx, out_h)
    np.add.at(m, (rows, ii0 * w + jj0), (1 - ffy) * (1 - ffx))
    np.add.at(m, (rows, ii0 * w + jj1), (1 - ffy) * ffx)
    np.add.at(m, (rows, ii1 * w + jj0), ffy * (1 - ffx))
    np.add.at(m, (rows, ii1 * w + jj1), ffy * ffx)
    return m.astype(dtype)


def bilinear_upsample(x, out_hw: tuple[int, int]) -> Tensor:
    """Resample (B, h, w, C) to (B, H, W, C) with bilinear interpolation."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects 4D input, got shape {x.data.shape}")
    b, h, w, c = x.data.shape
    out_h, out_w = out_hw
    m = _bilinear_matrix(h, w, out_h, out_w, x.data.dtype)
    flat = x.data.reshape(b, h * w, c)
    out = np.einsum("pq,bqc->bpc", m, flat).reshape(b, out_h, out_w, c)

    def bwd(g, accum):
        gflat = g.reshape(b, out_h * out_w, c)
        accum(x, np.einsum("pq,bpc->bqc", m, gflat).reshape(x.data.shape))

    return _result(out, (x,), bwd)
