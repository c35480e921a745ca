"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 by default) plus an optional
gradient buffer.  Operations executed while a ``Tape`` is active append a
backward rule to that tape (a Wengert list, so the recording order is
already topological); ``Tape.backward`` replays the rules in reverse,
visiting each recorded operation exactly once.

Calling ``backward`` a second time on the same tape re-derives the same
gradients: all involved grad buffers are zeroed before accumulation, so
repeated calls are idempotent rather than accumulating.

Outside a tape nothing is recorded, which makes inference allocation-free
with respect to graph state.  A tape is confined to one thread; the active
tape is tracked per-thread.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_STATE = threading.local()

# When enabled, every primitive asserts its output is finite.  Off by
# default; tests and debugging turn it on.
_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _active_tape() -> Optional["Tape"]:
    return getattr(_STATE, "tape", None)


class Tensor:
    """Dense N-d float array, optionally tracked for differentiation.

    ``data`` is row-major; ``grad`` (when populated by ``Tape.backward``)
    always has the same shape and dtype as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
            data = arr
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) != 1 else axes[0])


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class Tape:
    """Ordered record of operations from one forward pass.

    Each entry holds the output tensor, its input tensors and a backward
    rule mapping the output gradient to per-input gradients.  Entries are
    appended in execution order, so inputs always precede their consumers.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev = None

    def __len__(self) -> int:
        return len(self._entries)

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _STATE.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _STATE.tape = self._prev
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> None:
        self._entries.append((out, tuple(inputs), rule))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

        ``loss`` must be a scalar (one element).  Gradients are rebuilt from
        scratch on every call, so calling backward twice yields identical
        results; tensors on the tape but off the loss path get zeros.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if not self._entries:
            raise ValueError("backward on an empty tape; run a forward pass first")
        # accumulate into a scratch dict; stored arrays are never mutated in
        # place (rules may hand back views or shared buffers)
        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, rule in reversed(self._entries):
            gout = acc.get(id(out))
            if gout is None:
                continue
            grads = rule(gout)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                prev = acc.get(id(t))
                acc[id(t)] = g if prev is None else prev + g
        loss.grad = acc[id(loss)]
        assigned: set[int] = set()
        for out, inputs, _ in self._entries:
            for t in (out, *inputs):
                if t.requires_grad and id(t) not in assigned:
                    assigned.add(id(t))
                    g = acc.get(id(t))
                    if g is None:
                        t.grad = np.zeros_like(t.data)
                    else:
                        t.grad = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Run reverse-mode differentiation from a scalar ``loss``."""
    tape = tape or _active_tape()
    if tape is None:
        raise ValueError("backward needs an active or explicit Tape")
    tape.backward(loss)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable, name: str) -> Tensor:
    """Create an op output, recording ``rule`` on the active tape if needed."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {name}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcastable(a, b, "add")
    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _emit(a.data + b.data, (a, b), rule, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcastable(a, b, "sub")
    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _emit(a.data - b.data, (a, b), rule, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcastable(a, b, "mul")
    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _emit(a.data * b.data, (a, b), rule, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    def rule(g):
        return (g * s,)
    return _emit(a.data * a.data.dtype.type(s), (a,), rule, "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def absolute(a: Tensor) -> Tensor:
    """|a|, with subgradient 0 at exactly 0."""
    def rule(g):
        return (g * np.sign(a.data),)
    return _emit(np.abs(a.data), (a,), rule, "abs")


def relu(a: Tensor) -> Tensor:
    def rule(g):
        return (g * (a.data > 0),)
    return _emit(np.maximum(a.data, 0), (a,), rule, "relu")


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))
    def rule(g):
        return (g * (y * (1.0 - y)),)
    return _emit(y.astype(a.dtype, copy=False), (a,), rule, "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = (x * phi).astype(a.dtype, copy=False)
    def rule(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf).astype(a.dtype, copy=False),)
    return _emit(y, (a,), rule, "gelu")


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=a.dtype)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            shape = list(a.shape)
            for d in ax:
                shape[d % a.ndim] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(out, (a,), rule, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for d in ax:
            n *= a.shape[d % a.ndim]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def global_avg_pool(a: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C,1,1], mean over the spatial grid."""
    if a.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-d NCHW tensor, got {a.shape}")
    return mean(a, axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    def rule(g):
        return (g.reshape(a.shape),)
    return _emit(a.data.reshape(shape), (a,), rule, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    def rule(g):
        return (g.transpose(inv),)
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,), rule, "transpose")


def roll(a: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(shifts)
    axes = tuple(axes)
    neg_shifts = tuple(-s for s in shifts)
    def rule(g):
        return (np.roll(g, neg_shifts, axis=axes),)
    return _emit(np.roll(a.data, shifts, axis=axes), (a,), rule, "roll")


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; duplicate-free, so backward scatters with +=."""
    def rule(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)
    return _emit(np.ascontiguousarray(a.data[key]), (a,), rule, "slice")


def index_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup along axis 0 (embedding-style gather)."""
    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)
    return _emit(table.data[idx], (table,), rule, "index_rows")


def pad_reflect_hw(a: Tensor, bottom: int, right: int) -> Tensor:
    """Reflect-pad a [B,H,W,C] tensor at the bottom/right spatial edges.

    Reflection never repeats the edge sample, so the source row/col parity
    is preserved (pad amount must be < dim).
    """
    if a.ndim != 4:
        raise ValueError(f"pad_reflect_hw expects [B,H,W,C], got {a.shape}")
    _, h, w, _ = a.shape
    if bottom >= h or right >= w:
        raise ValueError(f"reflect pad ({bottom},{right}) too large for spatial dims ({h},{w})")
    idx_h = np.pad(np.arange(h), (0, bottom), mode="reflect")
    idx_w = np.pad(np.arange(w), (0, right), mode="reflect")
    out = a.data[:, idx_h][:, :, idx_w]

    def rule(g):
        tmp = np.zeros((h,) + g.shape[:1] + g.shape[2:], dtype=g.dtype)
        np.add.at(tmp, idx_h, g.transpose(1, 0, 2, 3))
        tmp = tmp.transpose(1, 0, 2, 3)  # [B, H, Wp, C]
        ga = np.zeros((w, tmp.shape[0], h, tmp.shape[3]), dtype=g.dtype)
        np.add.at(ga, idx_w, tmp.transpose(2, 0, 1, 3))
        return (ga.transpose(1, 2, 0, 3),)

    return _emit(np.ascontiguousarray(out), (a,), rule, "pad_reflect_hw")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def rule(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit(np.matmul(a.data, b.data), (a, b), rule, "matmul")


# ---------------------------------------------------------------------------
# normalization / attention primitives


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / np.sum(e, axis=-1, keepdims=True)
    y = y.astype(a.dtype, copy=False)

    def rule(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _emit(y, (a,), rule, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then apply the affine pair."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match channel {c}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = (xhat * gamma.data + beta.data).astype(x.dtype, copy=False)

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = np.sum(g * xhat, axis=lead)
        dbeta = np.sum(g, axis=lead)
        dxhat = g * gamma.data
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx.astype(x.dtype, copy=False), dgamma, dbeta

    return _emit(y, (x, gamma, beta), rule, "layer_norm")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> [B,Ho,Wo,C*kh*kw] patch matrix (stride 1)."""
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [B,C,Ho,Wo,kh,kw]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho, wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, padding: str = "same") -> Tensor:
    """2-d cross-correlation (no kernel flip), stride 1, zero padding.

    ``padding='same'`` keeps H,W (odd kernels only); ``'valid'`` shrinks.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    b, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"same-padding needs odd kernel dims, got {kh}x{kw}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw)                    # [B,Ho,Wo,CKK]
    ho, wo = cols.shape[1], cols.shape[2]
    wmat = w.data.reshape(cout, -1).T             # [CKK,Cout]
    y = cols @ wmat                               # [B,Ho,Wo,Cout]
    if bias is not None:
        if bias.shape != (cout,):
            raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")
        y = y + bias.data
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))

    inputs = (x, w) if bias is None else (x, w, bias)

    def rule(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)        # [BHoWo,Cout]
        cols2d = cols.reshape(-1, cols.shape[-1])
        gw = (cols2d.T @ gmat).T.reshape(w.shape)
        gcols = (gmat @ wmat.T).reshape(b, ho, wo, cin, kh, kw)
        gcols = gcols.transpose(0, 3, 4, 5, 1, 2)               # [B,C,kh,kw,Ho,Wo]
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, i, j]
        gx = gxp[:, :, ph:ph + h, pw:pw + wdt] if (ph or pw) else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0).astype(bias.dtype, copy=False)

    return _emit(y, inputs, rule, "conv2d")


# ---------------------------------------------------------------------------
# pixel shuffle (compositions of reshape/transpose, so exactly invertible)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """[B,C,H,W] -> [B,C*r*r,H/r,W/r]; channel order (c, dy, dx)."""
    if r == 1:
        return reshape(x, x.shape)
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ValueError(f"pixel_unshuffle: spatial dims ({h},{w}) not divisible by r={r}")
    t = reshape(x, (b, c, h // r, r, w // r, r))
    t = transpose(t, (0, 1, 3, 5, 2, 4))
    return reshape(t, (b, c * r * r, h // r, w // r))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[B,C*r*r,H,W] -> [B,C,H*r,W*r]; exact inverse of pixel_unshuffle."""
    if r == 1:
        return reshape(x, x.shape)
    b, crr, h, w = x.shape
    if crr % (r * r):
        raise ValueError(f"pixel_shuffle: channels {crr} not divisible by r*r={r * r}")
    c = crr // (r * r)
    t = reshape(x, (b, c, r, r, h, w))
    t = transpose(t, (0, 1, 4, 2, 5, 3))
    return reshape(t, (b, c, h * r, w * r))
