"""
Linear-algebra subroutines: least squares, projected-gradient NNLS with box
constraints, and power-iteration spectral-norm estimation.

Solvers run in float64 internally regardless of input dtype; callers cast
results back to their working precision.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_LOWER = 1e-6
POWER_ITER_STEPS = 10


@dataclass(frozen=True)
class BoxBounds:
    """Feasible interval [lower, upper] for NNLS weights; upper may be None."""

    lower: float = DEFAULT_LOWER
    upper: Optional[float] = None

    def __post_init__(self):
        if self.lower < 0:
            raise ValueError("lower bound must be >= 0")
        if self.upper is not None and self.upper <= self.lower:
            raise ValueError("upper bound must exceed lower bound")

    def clamp(self, w: np.ndarray) -> np.ndarray:
        w = np.maximum(w, self.lower)
        if self.upper is not None:
            w = np.minimum(w, self.upper)
        return w


def solve_lstsq(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """
    Minimize ||X M - Y||_F^2; returns the minimum-norm minimizer when X is
    rank deficient (SVD-based). Y may be a vector or a matrix.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("non-finite inputs to solve_lstsq")
    M, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return M


def estimate_spectral_norm_sq(M: np.ndarray, steps: int = POWER_ITER_STEPS
                              ) -> float:
    """
    Rayleigh-quotient estimate of ||M||_2^2 after `steps` power iterations on
    M^T M, from the normalized all-ones start vector. The estimate never
    exceeds the true value and is nondecreasing in `steps`.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    M = np.asarray(M, dtype=np.float64)
    A = M.T @ M
    t = A.shape[0]
    v = np.full(t, 1.0 / np.sqrt(t))
    for _ in range(steps):
        w = A @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return float(v @ (A @ v))


def solve_nnls_pgd(M: np.ndarray, y: np.ndarray, iters: int = 0,
                   bounds: BoxBounds = BoxBounds()) -> np.ndarray:
    """
    Box-constrained least squares via projected gradient descent.

    Warm start: clamp(lstsq(M, y)). With iters == 0 that is the result.
    Otherwise run `iters` projected gradient steps on 0.5*||Mw - y||^2 with
    fixed step 1/L, L from estimate_spectral_norm_sq, projecting into the
    box after every step. The result is always feasible elementwise.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    M = np.asarray(M, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = bounds.clamp(solve_lstsq(M, y))
    if iters == 0:
        return w
    L = estimate_spectral_norm_sq(M)
    if L <= 0.0:
        return w
    eta = 1.0 / L
    for _ in range(iters):
        grad = M.T @ (M @ w - y)
        w = bounds.clamp(w - eta * grad)
    return w
