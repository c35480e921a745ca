"""Windowed multi-head self-attention and the alternating-shift transformer layer.

Token maps are [B, H*W, C] in raster order; attention runs per M x M window.
Odd-indexed layers cyclically shift the grid by M//2 so neighbouring windows
exchange information, with wrapped-around token pairs suppressed by an
additive -1e9 mask derived from pre-shift region ids.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import LayerNorm, Linear, Mlp, trunc_normal

MASK_VALUE = -1e9


def window_partition(x: Tensor, m: int) -> Tensor:
    """[B,H,W,C] -> [B*(H/M)*(W/M), M*M, C], windows in raster order."""
    b, h, w, c = x.shape
    if h % m or w % m:
        raise ValueError(f"window_partition: dims ({h},{w}) not divisible by window {m}")
    t = ag.reshape(x, (b, h // m, m, w // m, m, c))
    t = ag.transpose(t, (0, 1, 3, 2, 4, 5))
    return ag.reshape(t, (b * (h // m) * (w // m), m * m, c))


def window_reverse(windows: Tensor, m: int, h: int, w: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    n_win = (h // m) * (w // m)
    if h % m or w % m or windows.shape[0] % n_win:
        raise ValueError(
            f"window_reverse: {windows.shape[0]} windows inconsistent with ({h},{w}), M={m}"
        )
    b = windows.shape[0] // n_win
    c = windows.shape[-1]
    t = ag.reshape(windows, (b, h // m, w // m, m, m, c))
    t = ag.transpose(t, (0, 1, 3, 2, 4, 5))
    return ag.reshape(t, (b, h, w, c))


def cyclic_shift(x: Tensor, s: int) -> Tensor:
    """Toroidal roll of a [B,H,W,C] map by (-s,-s); s<0 undoes s>0."""
    if s == 0:
        return x
    return ag.roll(x, (-s, -s), (1, 2))


def region_ids(h: int, w: int, m: int, s: int) -> np.ndarray:
    """Pre-shift region id of every grid position (the standard 3x3 slicing)."""
    ids = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    for hs in ((0, h - m), (h - m, h - s), (h - s, h)):
        for ws in ((0, w - m), (w - m, w - s), (w - s, w)):
            ids[hs[0]:hs[1], ws[0]:ws[1]] = cnt
            cnt += 1
    return ids


def attention_mask(h: int, w: int, m: int, s: int) -> np.ndarray:
    """[numWindows, M*M, M*M] additive mask for shifted-window attention.

    0 where both tokens of a window came from the same pre-shift region,
    MASK_VALUE otherwise; all zero when s == 0.
    """
    n_win = (h // m) * (w // m)
    if s == 0:
        return np.zeros((n_win, m * m, m * m), dtype=np.float32)
    ids = region_ids(h, w, m, s)
    ids = np.roll(ids, (-s, -s), axis=(0, 1))
    wins = ids.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(n_win, m * m)
    diff = wins[:, :, None] - wins[:, None, :]
    return np.where(diff == 0, 0.0, MASK_VALUE).astype(np.float32)


def relative_position_index(m: int) -> np.ndarray:
    """[M*M, M*M] lookup of relative-offset bins into a (2M-1)^2 table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel.transpose(1, 2, 0)
    rel[:, :, 0] += m - 1
    rel[:, :, 1] += m - 1
    rel[:, :, 0] *= 2 * m - 1
    return rel.sum(-1)


class WindowAttention:
    """Per-window multi-head attention with a learned relative position bias.

    ``attn_dim`` decouples the attention width from the channel count; the
    published variants run attention at width 192 regardless of C.
    """

    def __init__(self, rng, dim: int, heads: int, window: int, attn_dim: Optional[int] = None):
        attn_dim = attn_dim or dim
        if attn_dim % heads:
            raise ValueError(f"attention width {attn_dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.attn_dim = attn_dim
        self.head_dim = attn_dim // heads
        self.qkv = Linear(rng, dim, 3 * attn_dim)
        self.proj = Linear(rng, attn_dim, dim)
        self.bias_table = Tensor(
            trunc_normal(rng, ((2 * window - 1) ** 2, heads)), requires_grad=True
        )
        self._bias_index = relative_position_index(window).reshape(-1)

    def params(self):
        return OrderedDict(qkv=self.qkv, proj=self.proj, rpb=self.bias_table)

    def _position_bias(self) -> Tensor:
        t = self.window * self.window
        bias = ag.index_rows(self.bias_table, self._bias_index)  # [T*T, heads]
        bias = ag.reshape(bias, (t, t, self.heads))
        return ag.transpose(bias, (2, 0, 1))  # [heads, T, T]

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """x: [nW*B, T, C] window tokens; mask: [nW, T, T] additive or None."""
        nwb, t, c = x.shape
        if c != self.dim:
            raise ValueError(f"attention built for {self.dim} channels, got {c}")
        h, d = self.heads, self.head_dim
        qkv = self.qkv(x)  # [nWB, T, 3A]
        qkv = ag.reshape(qkv, (nwb, t, 3, h, d))
        qkv = ag.transpose(qkv, (2, 0, 3, 1, 4))  # [3, nWB, heads, T, d]
        q = ag.slice_(qkv, (0,))
        k = ag.slice_(qkv, (1,))
        v = ag.slice_(qkv, (2,))
        attn = ag.matmul(ag.scale(q, 1.0 / np.sqrt(d)), ag.transpose(k, (0, 1, 3, 2)))
        attn = attn + self._position_bias()
        if mask is not None:
            n_win = mask.shape[0]
            attn = ag.reshape(attn, (nwb // n_win, n_win, h, t, t))
            attn = attn + Tensor(mask[None, :, None].astype(attn.dtype))
            attn = ag.reshape(attn, (nwb, h, t, t))
        attn = ag.softmax_lastdim(attn)
        out = ag.matmul(attn, v)  # [nWB, heads, T, d]
        out = ag.transpose(out, (0, 2, 1, 3))
        out = ag.reshape(out, (nwb, t, h * d))
        return self.proj(out)


class SwinLayer:
    """Pre-norm transformer layer: windowed MSA then MLP, both residual.

    ``shift`` is 0 on even layer indices and window//2 on odd ones, giving
    the alternating W-MSA / SW-MSA pattern.
    """

    def __init__(self, rng, dim: int, heads: int, window: int, shift: int,
                 mlp_ratio: int = 4, attn_dim: Optional[int] = None):
        if not 0 <= shift < window:
            raise ValueError(f"shift {shift} out of range for window {window}")
        self.dim = dim
        self.window = window
        self.shift = shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, heads, window, attn_dim=attn_dim)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, mlp_ratio * dim)
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    def params(self):
        return OrderedDict(norm1=self.norm1, attn=self.attn, norm2=self.norm2, mlp=self.mlp)

    def _mask_for(self, h: int, w: int) -> Optional[np.ndarray]:
        if self.shift == 0:
            return None
        key = (h, w)
        if key not in self._mask_cache:
            self._mask_cache[key] = attention_mask(h, w, self.window, self.shift)
        return self._mask_cache[key]

    def __call__(self, x: Tensor, hw: tuple[int, int]) -> Tensor:
        h, w = hw
        b, length, c = x.shape
        if length != h * w:
            raise ValueError(f"token count {length} != H*W = {h}*{w}")
        m = self.window

        shortcut = x
        y = self.norm1(x)
        y = ag.reshape(y, (b, h, w, c))
        if self.shift:
            y = cyclic_shift(y, self.shift)
        wins = window_partition(y, m)
        wins = self.attn(wins, mask=self._mask_for(h, w))
        y = window_reverse(wins, m, h, w)
        if self.shift:
            y = cyclic_shift(y, -self.shift)
        y = ag.reshape(y, (b, length, c))
        x = shortcut + y
        return x + self.mlp(self.norm2(x))
