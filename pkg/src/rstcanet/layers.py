"""Parameter containers shared by the attention and convolutional stacks."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within +-2 std."""
    x = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    for _ in range(16):
        bad = np.abs(x) > bound
        if not bad.any():
            break
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    np.clip(x, -bound, bound, out=x)
    return x.astype(np.float32)


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class Linear:
    """y = x @ W + b with W of shape [d_in, d_out]."""

    def __init__(self, rng, d_in: int, d_out: int, std: float = 0.02):
        self.weight = Tensor(trunc_normal(rng, (d_in, d_out), std), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.matmul(x, self.weight) + self.bias

    def params(self):
        return OrderedDict(weight=self.weight, bias=self.bias)


class Conv2d:
    """3x3/1x1-style conv wrapper, stride 1, same padding by default."""

    def __init__(self, rng, c_in: int, c_out: int, k: int, padding: str = "same"):
        fan_in = c_in * k * k
        self.weight = Tensor(kaiming_normal(rng, (c_out, c_in, k, k), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, padding=self.padding)

    def params(self):
        return OrderedDict(weight=self.weight, bias=self.bias)


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, eps=self.eps)

    def params(self):
        return OrderedDict(gamma=self.gamma, beta=self.beta)


class Mlp:
    """Two-layer token MLP with exact-erf GELU between."""

    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))

    def params(self):
        return OrderedDict(fc1=self.fc1, fc2=self.fc2)


def collect_params(container, prefix: str = "") -> "OrderedDict[str, Tensor]":
    """Flatten nested ``.params()`` dicts / lists into dotted names.

    Shared sub-modules (same object reached twice) are listed once, under
    the first name encountered.
    """
    out: "OrderedDict[str, Tensor]" = OrderedDict()
    seen: set[int] = set()

    def walk(obj, name):
        if isinstance(obj, Tensor):
            if id(obj) not in seen:
                seen.add(id(obj))
                out[name] = obj
            return
        if isinstance(obj, (list, tuple)):
            for i, item in enumerate(obj):
                walk(item, f"{name}.{i}" if name else str(i))
            return
        if hasattr(obj, "params"):
            if id(obj) in seen:
                return
            seen.add(id(obj))
            for key, val in obj.params().items():
                walk(val, f"{name}.{key}" if name else key)
            return
        raise TypeError(f"cannot collect parameters from {type(obj)!r} at {name!r}")

    walk(container, prefix)
    return out


def cast_params(container, dtype) -> None:
    """In-place dtype change of every parameter (float64 gradcheck helper)."""
    for t in collect_params(container).values():
        t.data = t.data.astype(dtype)
