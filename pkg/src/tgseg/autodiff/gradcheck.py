"""Central finite-difference checks for the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-4,
                   coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences at every element, or only at the flat indices ``coords``."""
    g = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Largest per-element ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
                    floor: float = 1e-4, max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Return the worst relative error over every element of every input.

    ``fn`` must rebuild the scalar output from ``inputs`` on each call, and the
    inputs should be f64 for the tolerance to mean anything. With
    ``max_coords``, larger inputs are checked at that many random elements.
    """
    for x in inputs:
        x.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        coords = None
        if max_coords is not None and x.data.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(x.data.size, max_coords, replace=False))
        numeric = numerical_grad(fn, x, h, coords)
        if coords is not None:
            analytic, numeric = analytic.reshape(-1)[coords], numeric.reshape(-1)[coords]
        worst = max(worst, max_rel_error(analytic, numeric, floor))
    return worst
