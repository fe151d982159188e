"""Central finite-difference gradient checker."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` in the Euclidean norm (0 when both vanish)."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(
    fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5, entries: np.ndarray | None = None,
) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``t``.

    ``entries`` restricts the probe to some flat indices; other slots stay 0.
    """
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    idx = range(flat.size) if entries is None else entries
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(t.shape)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between analytic and numeric gradients.

    ``fn`` must rebuild the graph on every call and return a scalar. With
    ``max_entries`` only a random subset of each input is probed.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks require float64 tensors")
        t.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        entries = None
        if max_entries is not None and t.data.size > max_entries:
            entries = rng.choice(t.data.size, size=max_entries, replace=False)
        numeric = numeric_grad(fn, t, h, entries)
        if entries is not None:
            analytic = analytic.reshape(-1)[entries]
            numeric = numeric.reshape(-1)[entries]
        worst = max(worst, relative_error(analytic, numeric))
    return worst
