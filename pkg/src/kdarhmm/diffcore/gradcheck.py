"""Central finite-difference comparison against reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NumericalError, Tape, Tensor, backward


def numerical_gradient(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> np.ndarray:
    x0 = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp.reshape(-1)[i] += step
        xm.reshape(-1)[i] -= step
        fp = f(Tensor(xp)).item()
        fm = f(Tensor(xm)).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at perturbed coordinate {i}")
        flat[i] = (fp - fm) / (2.0 * step)
    return grad


def check_gradient(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Worst componentwise relative error between backward-mode and central differences.

    The denominator for each component is ``max(|a|, |b|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    tape = Tape()
    x = tape.leaf(np.array(point, dtype=np.float64))
    y = f(x)
    if not np.all(np.isfinite(y.value)):
        raise NumericalError("non-finite function value at the base point")
    analytic = backward(tape, y)[x]
    numeric = numerical_gradient(f, point, step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
