"""
Compact-key subset selection.

Two families: highest-attention scoring (mean/RMS/max aggregation of softmax
weights over reference queries) with plain or global top-k, and greedy
matching pursuit on the mass features with periodic box-NNLS refits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .attention import scaled_logits
from .solvers import BoxBounds, solve_nnls_pgd

AGGREGATIONS = ("mean", "rms", "max")

# Weight box and prune threshold for greedy selection ("stabilizing beta"):
# drop keys whose fitted log-weight falls below -7; cap weights at e^7.
OMP_BOUNDS = BoxBounds(lower=1e-6, upper=math.exp(7.0))
OMP_PRUNE_THRESHOLD = -7.0
MAX_REFILL_ROUNDS = 10


@dataclass
class MassFeatures:
    """
    Per-query max-shifted mass features for one head.

    Phi[i, j] = exp(L[i, j] - rowmax[i]) in (0, 1]; m[i] = sum_j Phi[i, j].
    """

    Phi: np.ndarray       # (n, T) float32
    m: np.ndarray         # (n,) float64
    rowmax: np.ndarray    # (n,) float64


@dataclass
class SelectionResult:
    S: np.ndarray                       # sorted distinct indices into [0, T)
    w: Optional[np.ndarray] = None      # weights aligned with S
    scores: Optional[np.ndarray] = None
    truncated: bool = False             # refill budget exhausted before |S|=t

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.int64)


def mass_features(Q: np.ndarray, K: np.ndarray,
                  scale: Optional[float] = None,
                  key_bias: Optional[np.ndarray] = None) -> MassFeatures:
    """Build shifted features/targets for mass matching."""
    L = scaled_logits(Q, K, beta=key_bias, scale=scale)    # (n, T)
    rowmax = L.max(axis=1)
    Phi = np.exp(L - rowmax[:, None])                      # (n, T) f32
    m = Phi.sum(axis=1, dtype=np.float64)
    return MassFeatures(Phi=Phi, m=m, rowmax=rowmax.astype(np.float64))


def score_keys(Q: np.ndarray, K: np.ndarray, agg: str = "rms",
               scale: Optional[float] = None,
               key_bias: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-key importance from softmax attention weights over the queries.

    a[i, :] = softmax(scaled logits of query i); score_j aggregates
    (a[1,j], ..., a[n,j]) by mean, root-mean-square, or max.
    """
    if agg not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation: {agg!r}")
    L = scaled_logits(Q, K, beta=key_bias, scale=scale)
    phi = np.exp(L - L.max(axis=1, keepdims=True))
    a = phi / phi.sum(axis=1, keepdims=True, dtype=np.float64)  # (n, T)
    if agg == "mean":
        return a.mean(axis=0)
    if agg == "rms":
        return np.sqrt(np.mean(a * a, axis=0))
    return a.max(axis=0)


def select_topk(scores: np.ndarray, t: int) -> SelectionResult:
    """Indices of the t largest scores; ties break toward the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    T = scores.shape[0]
    if not 1 <= t <= T:
        raise ValueError(f"t={t} out of range for {T} keys")
    order = np.argsort(-scores, kind="stable")
    S = np.sort(order[:t])
    return SelectionResult(S=S, scores=scores)


def _refit(Phi: np.ndarray, m: np.ndarray, S: List[int],
           bounds: BoxBounds) -> tuple:
    """Clamped least-squares weights on columns S and the new residual."""
    if not S:
        return np.zeros(0), m.copy()
    S_sorted = sorted(S)
    w = solve_nnls_pgd(Phi[:, S_sorted], m, iters=0, bounds=bounds)
    r = m - Phi[:, S_sorted] @ w
    return w, r


def _greedy_extend(Phi: np.ndarray, m: np.ndarray, selected: List[int],
                   blocked: set, t: int, k: int, tau: int,
                   bounds: BoxBounds) -> tuple:
    """
    Grow `selected` to t indices, adding the k best-correlated unselected
    columns each iteration and refitting every tau iterations and at the end.
    """
    T = Phi.shape[1]
    w, r = _refit(Phi, m, selected, bounds)
    u = 0
    while len(selected) < t:
        candidates = [j for j in range(T)
                      if j not in blocked and j not in set(selected)]
        if not candidates:
            break
        u += 1
        corr = r @ Phi                                     # (T,)
        order = sorted(candidates, key=lambda j: (-corr[j], j))
        take = min(k, t - len(selected))
        selected.extend(order[:take])
        if u % tau == 0 or len(selected) >= t:
            w, r = _refit(Phi, m, selected, bounds)
    if len(selected) != len(w):                            # loop broke early
        w, r = _refit(Phi, m, selected, bounds)
    return w, r


def select_omp(features: MassFeatures, t: int, k: int = 1, tau: int = 1,
               beta_bounds: BoxBounds = OMP_BOUNDS,
               prune_threshold: float = OMP_PRUNE_THRESHOLD
               ) -> SelectionResult:
    """
    Greedy mass-matching selection with periodic refits.

    At each iteration the k unselected columns with the largest residual
    correlation r^T Phi[:, j] are added (ties to the lowest index); every tau
    iterations, and always at the end, weights are refit by clamped least
    squares and the residual updated. Selected keys whose log-weight falls
    below `prune_threshold` are then dropped and selection continues to
    refill, up to MAX_REFILL_ROUNDS; the result is flagged truncated when the
    refill budget runs out or candidates are exhausted.
    """
    Phi = np.asarray(features.Phi, dtype=np.float64)
    m = np.asarray(features.m, dtype=np.float64)
    T = Phi.shape[1]
    if not 1 <= t <= T:
        raise ValueError(f"t={t} out of range for {T} keys")
    if k < 1 or tau < 1:
        raise ValueError("k and tau must be >= 1")

    selected: List[int] = []
    blocked: set = set()
    w, _ = _greedy_extend(Phi, m, selected, blocked, t, k, tau, beta_bounds)

    rounds = 0
    while rounds < MAX_REFILL_ROUNDS:
        S_sorted = sorted(selected)
        keep = np.log(np.maximum(w, np.finfo(np.float64).tiny)) \
            >= prune_threshold
        if keep.all():
            break
        blocked.update(j for j, ok in zip(S_sorted, keep) if not ok)
        selected = [j for j, ok in zip(S_sorted, keep) if ok]
        w, _ = _greedy_extend(Phi, m, selected, blocked, t, k, tau,
                              beta_bounds)
        rounds += 1
        if len(selected) < t and len(selected) + len(blocked) >= T:
            break

    S_sorted = sorted(selected)
    w, _ = _refit(Phi, m, S_sorted, beta_bounds)
    truncated = len(S_sorted) < t
    return SelectionResult(S=np.asarray(S_sorted, dtype=np.int64), w=w,
                           truncated=truncated)


def selection_residual(features: MassFeatures, S: Sequence[int],
                       bounds: BoxBounds = OMP_BOUNDS) -> float:
    """Mass residual ||Phi[:, S] w - m||_2 with clamped-lstsq weights."""
    Phi = np.asarray(features.Phi, dtype=np.float64)
    w, r = _refit(Phi, features.m, sorted(int(j) for j in S), bounds)
    return float(np.linalg.norm(r))


def select_global_topk(per_head_scores: Sequence[np.ndarray], B: int
                       ) -> List[np.ndarray]:
    """
    Keep the B largest (head, key) scores across heads.

    Ties break by (head index, key index) ascending. Returns per-head sorted
    index arrays whose lengths sum to exactly B; heads may come back empty.
    """
    sizes = [len(s) for s in per_head_scores]
    total = sum(sizes)
    if not 0 <= B <= total:
        raise ValueError(f"B={B} out of range for {total} keys")
    flat_scores = np.concatenate(
        [np.asarray(s, dtype=np.float64) for s in per_head_scores]) \
        if total else np.zeros(0)
    flat_head = np.concatenate(
        [np.full(n, i, dtype=np.int64) for i, n in enumerate(sizes)]) \
        if total else np.zeros(0, dtype=np.int64)
    flat_idx = np.concatenate(
        [np.arange(n, dtype=np.int64) for n in sizes]) \
        if total else np.zeros(0, dtype=np.int64)
    # lexsort: last key is primary; ascending head/key order breaks ties
    order = np.lexsort((flat_idx, flat_head, -flat_scores))
    picked = order[:B]
    out = []
    for i, n in enumerate(sizes):
        mine = flat_idx[picked[flat_head[picked] == i]]
        out.append(np.sort(mine))
    return out
