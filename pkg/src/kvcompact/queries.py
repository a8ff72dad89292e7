"""
Reference-query generation and subsampling.

Random queries come from a counter-based Philox generator and are rescaled
to a target row norm (per-row by default, or by one global factor matching
the mean norm). Large query streams are reduced by standard single-pass
reservoir sampling with a seeded generator.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from .attention import QuerySet

DEFAULT_CAP = 50_000


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass
class QueryBudget:
    cap: int = DEFAULT_CAP
    seed: int = 0

    def __post_init__(self):
        if self.cap < 1:
            raise ValueError("cap must be >= 1")


def gen_random_queries(n: int, d: int, target_norm: Optional[float] = None,
                       seed: Union[int, np.random.SeedSequence] = 0,
                       norm_mode: str = "per_row") -> QuerySet:
    """
    n i.i.d. standard-normal rows rescaled to `target_norm` (default
    sqrt(d), the synthetic stand-in for a head's typical query norm).

    norm_mode "per_row" rescales every row to the target exactly;
    "mean" applies one global factor so the mean row norm matches.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    if target_norm is None:
        target_norm = float(np.sqrt(d))
    if target_norm <= 0:
        raise ValueError("target_norm must be positive")
    if norm_mode not in ("per_row", "mean"):
        raise ValueError(f"unknown norm_mode: {norm_mode!r}")
    rng = _rng(seed)
    Q = rng.standard_normal((n, d))
    norms = np.linalg.norm(Q, axis=1)
    norms = np.where(norms == 0.0, 1.0, norms)
    if norm_mode == "per_row":
        Q = Q * (target_norm / norms)[:, None]
    else:
        Q = Q * (target_norm / norms.mean())
    return QuerySet(Q=Q.astype(np.float32), provenance="random",
                    seed=seed if isinstance(seed, int) else None)


def _as_rows(stream) -> List[np.ndarray]:
    if isinstance(stream, QuerySet):
        return list(stream.Q)
    if isinstance(stream, np.ndarray):
        return list(stream)
    return [np.asarray(r) for r in stream]


def reservoir_subsample(stream, budget: QueryBudget,
                        provenance: Optional[str] = None) -> QuerySet:
    """
    Uniform-without-replacement sample of at most budget.cap rows.

    Streams no longer than the cap come back complete and in order (no
    random draws are consumed). Longer streams go through standard reservoir
    replacement: row i >= cap replaces a random slot j ~ U[0, i] when j < cap.
    """
    if provenance is None:
        provenance = stream.provenance if isinstance(stream, QuerySet) \
            else "mixed"
    rows = _as_rows(stream)
    if not rows:
        raise ValueError("empty query stream")
    cap = budget.cap
    if len(rows) <= cap:
        out = rows
    else:
        rng = _rng(budget.seed)
        out = rows[:cap]
        for i in range(cap, len(rows)):
            j = int(rng.integers(0, i + 1))
            if j < cap:
                out[j] = rows[i]
    return QuerySet(Q=np.stack(out).astype(np.float32),
                    provenance=provenance, seed=budget.seed)


def merge_query_sets(sets: Sequence[QuerySet],
                     budget: QueryBudget) -> QuerySet:
    """Concatenate query sets, then reservoir-subsample to the cap."""
    if not sets:
        raise ValueError("no query sets to merge")
    d = sets[0].Q.shape[1]
    for qs in sets:
        if qs.Q.shape[1] != d:
            raise ValueError("query sets disagree on head dim")
    provenances = {qs.provenance for qs in sets}
    provenance = provenances.pop() if len(provenances) == 1 else "mixed"
    combined = np.concatenate([qs.Q for qs in sets], axis=0)
    return reservoir_subsample(combined, budget, provenance=provenance)
