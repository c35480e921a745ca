"""Central finite-difference gradient oracle.

Deliberately independent of the tape machinery: it only perturbs raw numpy
buffers and re-runs the caller's forward function, so it can arbitrate when
an analytic backward rule is wrong.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .autograd import Tape, Tensor


def finite_diff_grad(f: Callable[[], object], x: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central-difference estimate of d f / d x, element by element.

    ``f`` re-runs the forward pass (reading ``x.data`` in place) and returns
    a scalar Tensor or float.  ``x.data`` is restored before returning.
    """
    base = x.data
    g = np.zeros(base.shape, dtype=np.float64)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        g[idx] = _centered_slope(f, base, idx, h)
    return g


def finite_diff_grad_at(
    f: Callable[[], object], x: Tensor, flat_indices: Iterable[int], h: float = 1e-3
) -> dict[int, float]:
    """Central differences at a subset of flattened indices of ``x``.

    Used to spot-check large parameter tensors without quadratic cost.
    """
    flat = x.data.reshape(-1)
    out = {}
    for i in flat_indices:
        out[int(i)] = _centered_slope(f, flat, (int(i),), h)
    return out


def _centered_slope(f, buf: np.ndarray, idx, h: float) -> float:
    orig = buf[idx]
    buf[idx] = orig + h
    fp = _as_scalar(f())
    buf[idx] = orig - h
    fm = _as_scalar(f())
    buf[idx] = orig
    return (fp - fm) / (2.0 * h)


def _as_scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data)
    return float(v)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(
    f: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    h: float = 1e-3,
    floor: float = 1e-4,
    subset: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare tape gradients of ``f()`` against finite differences.

    Returns the worst relative error across all checked tensors.  When
    ``subset`` is given, only that many randomly chosen entries per tensor
    are probed (full probe otherwise).
    """
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [np.array(t.grad, dtype=np.float64) for t in wrt]

    worst = 0.0
    rng = np.random.default_rng(seed)
    for t, a in zip(wrt, analytic):
        if subset is not None and t.size > subset:
            picks = rng.choice(t.size, size=subset, replace=False)
            fd = finite_diff_grad_at(f, t, picks, h=h)
            a_flat = a.reshape(-1)
            err = max(
                max_rel_error(np.array([a_flat[i]]), np.array([v]), floor)
                for i, v in fd.items()
            )
        else:
            fd = finite_diff_grad(f, t, h=h)
            err = max_rel_error(a, fd, floor)
        worst = max(worst, err)
    return worst
