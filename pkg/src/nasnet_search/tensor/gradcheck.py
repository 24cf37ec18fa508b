"""Central finite-difference oracle for checking analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tape, Tensor, no_record


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d x by central differences; ``x.data`` is perturbed in place and restored."""
    x.data = np.ascontiguousarray(x.data)
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_record():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = float(fn().data)
            flat[k] = orig - h
            down = float(fn().data)
            flat[k] = orig
            grad.reshape(-1)[k] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    diff = np.linalg.norm(np.asarray(analytic, np.float64) - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return float(diff)
    return float(diff / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> dict[str, float]:
    """Compare tape gradients of scalar ``fn()`` against finite differences.

    Run under ``precision("float64")``; returns the relative error per parameter.
    """
    with Tape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    errors = {}
    for k, p in enumerate(params):
        analytic = grads.get(p, np.zeros_like(p.data))
        numeric = numeric_grad(fn, p, h)
        errors[p.name or f"param{k}"] = relative_error(analytic, numeric)
    return errors
