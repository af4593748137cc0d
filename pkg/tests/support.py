"""Shared test oracles: central finite differences and gradient comparison."""

from __future__ import annotations

import numpy as np

FD_EPS = 1e-5


def central_diff(f, x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Numerical d f() / d x by central differences, perturbing x in place.

    f takes no arguments and must rebuild its forward pass from x on each
    call, so the perturbation is visible.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Worst relative disagreement; entries tiny next to the matrix scale are
    compared on that absolute scale instead so 0-vs-roundoff does not explode."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-4 * scale)
    return float((np.abs(a - b) / denom).max())
