"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .ops import record_kinks
from .tensor import Tensor, backward, no_grad


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> np.ndarray:
    num = np.zeros(x.shape)
    flat = x.data.reshape(-1)
    out = num.reshape(-1)
    with no_grad():
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + eps
            fp = f(x).item()
            flat[c] = orig - eps
            fm = f(x).item()
            flat[c] = orig
            out[c] = (fp - fm) / (2.0 * eps)
    return num


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    g = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = None
    return g


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max over coordinates of ``|a - n| / max(1e-8, |a| + |n|)``.

    ``f`` maps ``x`` to a scalar tensor; ``x.data`` is perturbed in place and
    restored.
    """
    a = analytic_grad(f, x)
    n = numeric_grad(f, x, eps)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def activation_pattern(f: Callable[[Tensor], Tensor], x: Tensor) -> list[np.ndarray]:
    with no_grad(), record_kinks() as rec:
        f(x)
    return rec


def is_smooth_at(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> bool:
    """True when no single-coordinate ``+-eps`` perturbation flips a ReLU or max branch.

    At such points the central difference sees only one linear piece of
    every kinked op, so it is comparable with the analytic gradient.
    """
    base = activation_pattern(f, x)
    flat = x.data.reshape(-1)
    for c in range(flat.size):
        orig = flat[c]
        for delta in (eps, -eps):
            flat[c] = orig + delta
            pat = activation_pattern(f, x)
            flat[c] = orig
            if len(pat) != len(base) or any(not np.array_equal(p, q) for p, q in zip(pat, base)):
                return False
    return True
