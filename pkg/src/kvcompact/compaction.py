"""
Per-head attention-matching pipeline and cache-level orchestration.

The pipeline order is fixed: select compact keys C_k, then fit the bias beta
to match attention mass, then fit values C_v to match attention outputs.
Heads compact independently; chunked compaction slices a cache into spans,
compacts each span, and merges the results around fixed prefix/suffix blocks
that pass through unchanged with beta = 0.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .attention import (CompactHead, HeadCache, QuerySet, attn_output,
                        default_scale, rope_rotate, scaled_logits)
from .budgets import BudgetSchedule, shares_to_counts
from .container import bf16_round
from .selection import (OMP_BOUNDS, OMP_PRUNE_THRESHOLD, mass_features,
                        score_keys, select_omp, select_topk)
from .solvers import BoxBounds, solve_lstsq, solve_nnls_pgd

METHODS = ("omp", "omp_fast", "highest_attention", "selection_only")
BETA_MODES = ("nnls_box", "omp_prune", "zero")
VALUE_MODES = ("lstsq", "original")

# beta-mode solver settings: weight box and PGD iteration count
BETA_SETTINGS = {
    "nnls_box": (BoxBounds(lower=math.exp(-3.0), upper=math.exp(3.0)), 2),
    "omp_prune": (OMP_BOUNDS, 0),
}

_DEFAULT_BETA = {"omp": "omp_prune", "omp_fast": "omp_prune",
                 "highest_attention": "nnls_box", "selection_only": "zero"}
_DEFAULT_VALUE = {"omp": "lstsq", "omp_fast": "lstsq",
                  "highest_attention": "lstsq", "selection_only": "original"}

HeadKey = Tuple[int, int]


@dataclass
class CompactionConfig:
    """
    Knobs for one compaction run.

    method selects C_k construction; beta_mode and value_mode default per
    method (omp/omp_fast -> omp_prune + lstsq, highest_attention ->
    nnls_box + lstsq, selection_only -> zero + original). omp_fast presets
    omp_k=4, omp_tau=2 unless overridden.
    """

    method: str = "omp"
    ratio: float = 1.0
    agg: str = "rms"
    omp_k: Optional[int] = None
    omp_tau: Optional[int] = None
    beta_mode: Optional[str] = None
    value_mode: Optional[str] = None
    scale: Optional[float] = None
    dtype_out: str = "f32"

    def resolved(self) -> "CompactionConfig":
        cfg = replace(self)
        if cfg.method not in METHODS:
            raise ValueError(f"unknown method: {cfg.method!r}")
        if not 0.0 < cfg.ratio <= 1.0:
            raise ValueError("ratio must lie in (0, 1]")
        if cfg.dtype_out not in ("f32", "bf16"):
            raise ValueError(f"unknown dtype_out: {cfg.dtype_out!r}")
        if cfg.beta_mode is None:
            cfg.beta_mode = _DEFAULT_BETA[cfg.method]
        if cfg.value_mode is None:
            cfg.value_mode = _DEFAULT_VALUE[cfg.method]
        if cfg.beta_mode not in BETA_MODES:
            raise ValueError(f"unknown beta_mode: {cfg.beta_mode!r}")
        if cfg.value_mode not in VALUE_MODES:
            raise ValueError(f"unknown value_mode: {cfg.value_mode!r}")
        if cfg.method == "selection_only" and (
                cfg.beta_mode != "zero" or cfg.value_mode != "original"):
            raise ValueError(
                "selection_only requires beta_mode=zero, value_mode=original")
        fast = cfg.method == "omp_fast"
        if cfg.omp_k is None:
            cfg.omp_k = 4 if fast else 1
        if cfg.omp_tau is None:
            cfg.omp_tau = 2 if fast else 1
        if cfg.omp_k < 1 or cfg.omp_tau < 1:
            raise ValueError("omp_k and omp_tau must be >= 1")
        return cfg


@dataclass
class ChunkPlan:
    """Contiguous spans tiling the article region between fixed blocks."""

    spans: List[Tuple[int, int]]
    fixed_prefix_len: int = 0
    fixed_suffix_len: int = 0

    def validate(self, T: int) -> None:
        if self.fixed_prefix_len < 0 or self.fixed_suffix_len < 0:
            raise ValueError("fixed block lengths must be >= 0")
        lo, hi = self.fixed_prefix_len, T - self.fixed_suffix_len
        if lo > hi:
            raise ValueError("fixed blocks exceed the cache length")
        if not self.spans:
            raise ValueError("plan has no spans")
        cursor = lo
        for start, end in self.spans:
            if start != cursor:
                raise ValueError(
                    f"spans must tile [{lo}, {hi}); gap/overlap at {start}")
            if end <= start:
                raise ValueError(f"empty span ({start}, {end})")
            cursor = end
        if cursor != hi:
            raise ValueError(f"spans must end at {hi}, got {cursor}")


def _cast_out(a: np.ndarray, dtype_out: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    return bf16_round(a) if dtype_out == "bf16" else a


def fit_beta(Q: np.ndarray, K_orig: np.ndarray, C_k: np.ndarray,
             beta_mode: str = "nnls_box", scale: Optional[float] = None,
             orig_beta: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Fit per-key biases so the compact block matches the original mass.

    Builds A[i, j] = exp(scaled logit of q_i on (C_k)_j - shift_i) and
    targets m[i] = sum_k exp(scaled logit on K_orig - shift_i), both under
    the original cache's per-query max shift, then solves box-constrained
    least squares for w = exp(beta). Returns beta = log w.
    """
    if beta_mode == "zero":
        return np.zeros(np.asarray(C_k).shape[0], dtype=np.float64)
    if beta_mode not in BETA_SETTINGS:
        raise ValueError(f"unknown beta_mode: {beta_mode!r}")
    L_orig = scaled_logits(Q, K_orig, beta=orig_beta, scale=scale)
    shift = L_orig.max(axis=1)                              # (n,)
    m = np.exp((L_orig - shift[:, None]).astype(np.float64)) \
        .sum(axis=1)                                        # (n,)
    L_c = scaled_logits(Q, C_k, scale=scale)
    A = np.exp((L_c - shift[:, None]).astype(np.float64))   # (n, t)
    bounds, iters = BETA_SETTINGS[beta_mode]
    w = solve_nnls_pgd(A, m, iters=iters, bounds=bounds)
    return np.log(w)


def fit_values(Q: np.ndarray, K_orig: np.ndarray, V_orig: np.ndarray,
               C_k: np.ndarray, beta: np.ndarray,
               scale: Optional[float] = None,
               orig_beta: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Least-squares values: rows y_i are original attention outputs, rows x_i
    are biased softmax weights over (C_k, beta); returns argmin ||XC - Y||_F.
    """
    Y = attn_output(Q, K_orig, V_orig, beta=orig_beta, scale=scale)  # (n, d)
    L = scaled_logits(Q, C_k, beta=np.asarray(beta, dtype=np.float32),
                      scale=scale)
    phi = np.exp(L - L.max(axis=1, keepdims=True))
    X = phi / phi.sum(axis=1, keepdims=True, dtype=np.float64)  # (n, t)
    return solve_lstsq(X, Y)


def compact_head(head: HeadCache, q_ref: QuerySet, t: int,
                 cfg: CompactionConfig) -> CompactHead:
    """
    Compact one head to t keys: select C_k = K[S], fit beta, fit C_v.

    Computation is float32 with float64 solver internals; outputs are cast
    per cfg.dtype_out. The logical length carries over unchanged.
    """
    cfg = cfg.resolved()
    T = head.T
    if not 1 <= t <= T:
        raise ValueError(f"t={t} out of range for {T} keys")
    if q_ref.n < 1:
        raise ValueError("empty reference query set")
    scale = cfg.scale if cfg.scale is not None else default_scale(head.d)

    omp_w = None
    if cfg.method in ("omp", "omp_fast"):
        feats = mass_features(q_ref.Q, head.K, scale=scale,
                              key_bias=head.beta)
        sel = select_omp(feats, t, k=cfg.omp_k, tau=cfg.omp_tau,
                         beta_bounds=OMP_BOUNDS,
                         prune_threshold=OMP_PRUNE_THRESHOLD)
        S = sel.S
        omp_w = sel.w
    else:
        scores = score_keys(q_ref.Q, head.K, agg=cfg.agg, scale=scale,
                            key_bias=head.beta)
        S = select_topk(scores, t).S

    C_k = head.K[S]

    if cfg.beta_mode == "zero":
        # keep the source bias for rows that carry one (pass-through)
        beta = (head.beta[S].astype(np.float64) if head.beta is not None
                else np.zeros(len(S)))
    elif cfg.beta_mode == "omp_prune" and omp_w is not None:
        # the features already carry the source bias, so the fitted
        # multiplicity stacks on top of it
        beta = np.log(omp_w)
        if head.beta is not None:
            beta = beta + head.beta[S].astype(np.float64)
    else:
        beta = fit_beta(q_ref.Q, head.K, C_k, beta_mode=cfg.beta_mode,
                        scale=scale, orig_beta=head.beta)

    if cfg.value_mode == "original":
        C_v = head.V[S]
    else:
        C_v = fit_values(q_ref.Q, head.K, head.V, C_k, beta, scale=scale,
                         orig_beta=head.beta)

    return CompactHead(
        C_k=_cast_out(C_k, cfg.dtype_out),
        beta=_cast_out(beta, cfg.dtype_out),
        C_v=_cast_out(C_v, cfg.dtype_out),
        logical_length=head.logical_length,
        source_indices=S)


def _passthrough(head: HeadCache) -> CompactHead:
    T = head.T
    beta = head.beta if head.beta is not None \
        else np.zeros(T, dtype=np.float32)
    return CompactHead(C_k=head.K, beta=beta, C_v=head.V,
                       logical_length=head.logical_length,
                       source_indices=np.arange(T, dtype=np.int64))


def _uniform_count(ratio: float, T: int) -> int:
    return int(min(max(round(ratio * T), 1), T))


def head_counts(cache: Dict[HeadKey, HeadCache], ratio: float,
                schedule: Optional[BudgetSchedule]) -> Dict[HeadKey, int]:
    """Per-head key budgets: uniform rounding or schedule shares."""
    if schedule is None:
        return {key: _uniform_count(ratio, hc.T)
                for key, hc in cache.items()}
    missing = [key for key in schedule.shares if key not in cache]
    if missing:
        raise ValueError(f"schedule names unknown heads: {missing}")
    T_map = {key: cache[key].T for key in schedule.shares}
    return shares_to_counts(schedule, ratio, T_map)


def compact_cache(cache: Dict[HeadKey, HeadCache],
                  queries: Dict[HeadKey, QuerySet],
                  cfg: CompactionConfig,
                  schedule: Optional[BudgetSchedule] = None,
                  threads: Optional[int] = None
                  ) -> Dict[HeadKey, CompactHead]:
    """
    Compact every head independently under a uniform ratio or a budget
    schedule. Heads absent from the schedule pass through unchanged.
    """
    cfg = cfg.resolved()
    counts = head_counts(cache, cfg.ratio, schedule)
    for key in counts:
        if key not in queries:
            raise ValueError(f"missing queries for head {key}")

    def work(key: HeadKey) -> Tuple[HeadKey, CompactHead]:
        if key in counts:
            return key, compact_head(cache[key], queries[key], counts[key],
                                     cfg)
        return key, _passthrough(cache[key])

    keys = sorted(cache)
    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(work, keys))
    else:
        results = dict(map(work, keys))
    return {key: results[key] for key in keys}


def _merge_blocks(blocks: List[Tuple[np.ndarray, np.ndarray, np.ndarray,
                                     np.ndarray]],
                  logical_length: int) -> CompactHead:
    C_k = np.concatenate([b[0] for b in blocks], axis=0)
    beta = np.concatenate([b[1] for b in blocks], axis=0)
    C_v = np.concatenate([b[2] for b in blocks], axis=0)
    src = np.concatenate([b[3] for b in blocks], axis=0)
    return CompactHead(C_k=C_k, beta=beta, C_v=C_v,
                       logical_length=logical_length, source_indices=src)


def _slice_head(head: HeadCache, start: int, end: int) -> HeadCache:
    return HeadCache(K=head.K[start:end], V=head.V[start:end],
                     logical_length=end - start,
                     positions=head.positions[start:end],
                     rope=head.rope,
                     beta=None if head.beta is None
                     else head.beta[start:end])


def compact_chunked(cache: Dict[HeadKey, HeadCache],
                    plan: ChunkPlan,
                    chunk_queries: Sequence[Dict[HeadKey, QuerySet]],
                    cfg: CompactionConfig,
                    schedule: Optional[BudgetSchedule] = None,
                    mode: str = "kv_based",
                    chunk_caches: Optional[Sequence[Dict[HeadKey, HeadCache]]]
                    = None) -> Dict[HeadKey, CompactHead]:
    """
    Chunked compaction with fixed prefix/suffix blocks.

    kv_based slices each head's rows per span out of the full cache and
    compacts every slice with its chunk's queries. text_based consumes
    locally prefilled chunk caches (`chunk_caches`) and rotates each
    compacted chunk's keys by delta = global span start - local start
    before merging. Fixed blocks pass through bit-identically with beta=0,
    and the merged logical length equals the original T.
    """
    if mode not in ("kv_based", "text_based"):
        raise ValueError(f"unknown chunk mode: {mode!r}")
    cfg = cfg.resolved()
    keys = sorted(cache)
    T = cache[keys[0]].T
    plan.validate(T)
    if len(chunk_queries) != len(plan.spans):
        raise ValueError("need one query map per span")
    if mode == "text_based":
        if chunk_caches is None or len(chunk_caches) != len(plan.spans):
            raise ValueError("text_based mode needs one chunk cache per span")

    out: Dict[HeadKey, CompactHead] = {}
    for key in keys:
        head = cache[key]
        if head.T != T:
            raise ValueError("chunk plans require equal head lengths")
        blocks = []
        if plan.fixed_prefix_len > 0:
            p = plan.fixed_prefix_len
            blocks.append((head.K[:p], np.zeros(p, dtype=np.float32),
                           head.V[:p], np.arange(p, dtype=np.int64)))
        for i, (start, end) in enumerate(plan.spans):
            if key not in chunk_queries[i]:
                raise ValueError(f"missing chunk {i} queries for head {key}")
            if mode == "kv_based":
                piece = _slice_head(head, start, end)
                delta = 0
            else:
                piece = chunk_caches[i][key]
                delta = start - int(piece.positions[0])
            t_piece = _chunk_count(piece.T, cfg.ratio, schedule, key)
            ch = compact_head(piece, chunk_queries[i][key], t_piece, cfg)
            C_k = ch.C_k if delta == 0 else _cast_out(
                rope_rotate(ch.C_k, delta, head.rope), cfg.dtype_out)
            src = ch.source_indices + start
            blocks.append((C_k, ch.beta, ch.C_v, src))
        if plan.fixed_suffix_len > 0:
            s = T - plan.fixed_suffix_len
            blocks.append((head.K[s:],
                           np.zeros(plan.fixed_suffix_len, dtype=np.float32),
                           head.V[s:], np.arange(s, T, dtype=np.int64)))
        out[key] = _merge_blocks(blocks, logical_length=head.logical_length)
    return out


def _chunk_count(span_len: int, ratio: float,
                 schedule: Optional[BudgetSchedule],
                 key: HeadKey) -> int:
    if schedule is None or key not in schedule.shares:
        return _uniform_count(ratio, span_len)
    H = len(schedule.shares)
    ideal = schedule.shares[key] * H * ratio * span_len
    return int(min(max(round(ideal), 1), span_len))
