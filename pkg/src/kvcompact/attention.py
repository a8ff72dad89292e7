"""
Numerically stable attention primitives.

All operations work on a single KV-head: keys/values are (T, d) matrices with
rotary embeddings already applied to keys. Logits are scaled by `scale`
(default 1/sqrt(d)) and an optional per-key additive bias beta shifts them;
exp(beta_j) acts as a multiplicity weight for key j.

Precision policy: matmuls and exponentials run in float32; row sums
(attention mass, softmax denominators) accumulate in float64. Mass is kept in
shifted form (mass, logmax) so long contexts never overflow:
true mass = mass * exp(logmax).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

PROVENANCES = ("random", "context_prefill", "repeat_prefill", "self_study",
               "on_policy", "mixed")


@dataclass
class RopeParams:
    """Rotary-embedding convention carried alongside cached keys."""

    kind: str = "half_split"  # "half_split" pairs dim i with i + d/2
    base: float = 10000.0
    applied_to_keys: bool = True

    def __post_init__(self):
        if self.kind not in ("half_split", "none"):
            raise ValueError(f"unknown rope kind: {self.kind!r}")


@dataclass
class HeadCache:
    """
    Original per-head cache.

    Parameters
    ----------
    K, V : ndarray, shape (T, d)
        Keys (RoPE applied) and values.
    logical_length : int
        Token count this cache stands for positionally; >= T.
    positions : ndarray, shape (T,)
        Original token positions, strictly increasing.
    rope : RopeParams
    beta : ndarray, shape (T,), optional
        Per-key logit bias carried by an already-compacted source; None for
        fresh caches. Enables re-compaction of compacted caches.
    """

    K: np.ndarray
    V: np.ndarray
    logical_length: int = -1
    positions: Optional[np.ndarray] = None
    rope: RopeParams = field(default_factory=RopeParams)
    beta: Optional[np.ndarray] = None

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float32)
        self.V = np.asarray(self.V, dtype=np.float32)
        if self.K.ndim != 2 or self.V.ndim != 2:
            raise ValueError("K and V must be 2-D")
        if self.K.shape[0] != self.V.shape[0]:
            raise ValueError("K and V must have equal row counts")
        T = self.K.shape[0]
        if self.positions is None:
            self.positions = np.arange(T, dtype=np.int64)
        else:
            self.positions = np.asarray(self.positions, dtype=np.int64)
            if self.positions.shape != (T,):
                raise ValueError("positions must have one entry per row")
            if T > 1 and not np.all(np.diff(self.positions) > 0):
                raise ValueError("positions must be strictly increasing")
        if self.logical_length < 0:
            self.logical_length = T
        if self.logical_length < T:
            raise ValueError("logical_length must be >= physical length")
        if self.beta is not None:
            self.beta = np.asarray(self.beta, dtype=np.float32)
            if self.beta.shape != (T,):
                raise ValueError("beta must have one entry per key")

    @property
    def T(self) -> int:
        return self.K.shape[0]

    @property
    def d(self) -> int:
        return self.K.shape[1]

    @classmethod
    def from_compact(cls, compact: "CompactHead",
                     rope: Optional[RopeParams] = None) -> "HeadCache":
        """View a compacted head as a (biased) cache, for re-compaction."""
        t = compact.C_k.shape[0]
        if compact.source_indices is not None:
            positions = np.asarray(compact.source_indices, dtype=np.int64)
        else:
            positions = np.arange(t, dtype=np.int64)
        return cls(K=compact.C_k, V=compact.C_v,
                   logical_length=compact.logical_length,
                   positions=positions,
                   rope=rope if rope is not None else RopeParams(),
                   beta=compact.beta)


@dataclass
class CompactHead:
    """Compacted cache for one head: keys C_k, bias beta, values C_v."""

    C_k: np.ndarray
    beta: np.ndarray
    C_v: np.ndarray
    logical_length: int
    source_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.C_k = np.asarray(self.C_k, dtype=np.float32)
        self.C_v = np.asarray(self.C_v, dtype=np.float32)
        self.beta = np.asarray(self.beta, dtype=np.float32)
        t = self.C_k.shape[0]
        if t < 1:
            raise ValueError("compact head must retain at least one key")
        if self.C_v.shape[0] != t or self.beta.shape != (t,):
            raise ValueError("C_k, beta, C_v must agree on t")
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta must be finite")
        if self.source_indices is not None:
            self.source_indices = np.asarray(self.source_indices,
                                             dtype=np.int64)
            s = self.source_indices
            if s.shape != (t,):
                raise ValueError("source_indices must have one entry per key")
            if t > 1 and not np.all(np.diff(s) > 0):
                raise ValueError("source_indices must be distinct ascending")

    @property
    def t(self) -> int:
        return self.C_k.shape[0]


@dataclass
class QuerySet:
    """Reference queries for one KV head."""

    Q: np.ndarray
    provenance: str = "random"
    seed: Optional[int] = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float32)
        if self.Q.ndim != 2 or self.Q.shape[0] < 1:
            raise ValueError("Q must be (n, d) with n >= 1")
        if not np.all(np.isfinite(self.Q)):
            raise ValueError("queries must be finite")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance: {self.provenance!r}")

    @property
    def n(self) -> int:
        return self.Q.shape[0]


def default_scale(d: int) -> float:
    return 1.0 / float(np.sqrt(d))


def scaled_logits(Q: np.ndarray, K: np.ndarray,
                  beta: Optional[np.ndarray] = None,
                  scale: Optional[float] = None) -> np.ndarray:
    """
    L[i, j] = scale * <q_i, k_j> + beta_j, in float32.

    beta is treated as zero when absent; scale defaults to 1/sqrt(d).
    """
    Q = np.asarray(Q, dtype=np.float32)
    K = np.asarray(K, dtype=np.float32)
    if Q.ndim != 2 or K.ndim != 2 or Q.shape[1] != K.shape[1]:
        raise ValueError(f"dimension mismatch: Q {Q.shape} vs K {K.shape}")
    if scale is None:
        scale = default_scale(K.shape[1])
    if scale <= 0:
        raise ValueError("scale must be positive")
    L = (Q @ K.T) * np.float32(scale)                      # (n, T)
    if beta is not None:
        beta = np.asarray(beta, dtype=np.float32)
        if beta.shape != (K.shape[0],):
            raise ValueError("beta must have one entry per key")
        L = L + beta[None, :]
    return L


def attn_mass(Q: np.ndarray, K: np.ndarray,
              beta: Optional[np.ndarray] = None,
              scale: Optional[float] = None
              ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-query attention mass in shifted form.

    Returns
    -------
    mass : ndarray, shape (n,), float64
        sum_j exp(L[i, j] - logmax[i]).
    logmax : ndarray, shape (n,), float64
        Per-query max logit; true mass = mass * exp(logmax).
    """
    L = scaled_logits(Q, K, beta, scale)
    logmax = L.max(axis=1)                                 # (n,)
    phi = np.exp(L - logmax[:, None])                      # (n, T) f32
    mass = phi.sum(axis=1, dtype=np.float64)
    return mass, logmax.astype(np.float64)


def true_mass(mass: np.ndarray, logmax: np.ndarray) -> np.ndarray:
    """Unshifted mass; overflows to inf when not representable in f64."""
    with np.errstate(over="ignore"):
        return np.asarray(mass, dtype=np.float64) * np.exp(
            np.asarray(logmax, dtype=np.float64))


def attn_output(Q: np.ndarray, K: np.ndarray, V: np.ndarray,
                beta: Optional[np.ndarray] = None,
                scale: Optional[float] = None) -> np.ndarray:
    """
    Locally normalized attention output, (n, d) float32.

    out_i = sum_j exp(L[i,j]) v_j / sum_j exp(L[i,j]), computed with the same
    per-query max-shift as attn_mass.
    """
    K = np.asarray(K, dtype=np.float32)
    V = np.asarray(V, dtype=np.float32)
    if K.shape[0] != V.shape[0]:
        raise ValueError("K and V must have equal row counts")
    L = scaled_logits(Q, K, beta, scale)
    logmax = L.max(axis=1)
    phi = np.exp(L - logmax[:, None])                      # (n, T) f32
    num = phi @ V                                          # (n, d) f32
    den = phi.sum(axis=1, dtype=np.float64)                # (n,)
    return (num.astype(np.float64) / den[:, None]).astype(np.float32)


def concat_attn(Q: np.ndarray,
                blocks: Sequence[Tuple[np.ndarray, np.ndarray,
                                       Optional[np.ndarray]]],
                scale: Optional[float] = None) -> np.ndarray:
    """
    Attention over concatenated blocks via the mass-weighted mixture.

    Each block is (K_b, V_b, beta_b-or-None). Per block we compute the local
    attn_output and shifted mass, then combine with a global shift:

        out = sum_b softmass_b * out_b / sum_b softmass_b,
        softmass_b = mass_b * exp(logmax_b - global_max).

    Equals attn_output on the row-wise concatenation of all blocks.
    """
    if len(blocks) == 0:
        raise ValueError("need at least one block")
    outs, masses, logmaxes = [], [], []
    for K_b, V_b, beta_b in blocks:
        outs.append(attn_output(Q, K_b, V_b, beta_b, scale)
                    .astype(np.float64))
        m_b, l_b = attn_mass(Q, K_b, beta_b, scale)
        masses.append(m_b)
        logmaxes.append(l_b)
    logmaxes = np.stack(logmaxes, axis=0)                  # (B, n)
    global_max = logmaxes.max(axis=0)                      # (n,)
    softmass = np.stack(masses, axis=0) * np.exp(logmaxes - global_max)
    den = softmass.sum(axis=0)                             # (n,)
    num = sum(sm[:, None] * out for sm, out in zip(softmass, outs))
    return (num / den[:, None]).astype(np.float32)


def rope_rotate(K: np.ndarray, delta: int, rope: RopeParams) -> np.ndarray:
    """
    Shift keys by `delta` positions via a rotary phase rotation.

    Row x is rotated by angle theta_i * delta in plane (x_i, x_{i+d/2}),
    theta_i = base^(-2i/d) for i in [0, d/2). Preserves row norms; rotations
    compose additively in delta.
    """
    if rope.kind != "half_split":
        raise ValueError("rope_rotate requires kind='half_split'")
    K = np.asarray(K, dtype=np.float32)
    d = K.shape[1]
    if d % 2 != 0:
        raise ValueError("half_split rope requires even head dim")
    if delta == 0:
        return K.copy()
    half = d // 2
    theta = np.power(float(rope.base),
                     -2.0 * np.arange(half, dtype=np.float64) / d)
    angle = theta * float(delta)                           # (half,)
    cos, sin = np.cos(angle), np.sin(angle)
    x1 = K[:, :half].astype(np.float64)
    x2 = K[:, half:].astype(np.float64)
    out = np.empty_like(K, dtype=np.float64)
    out[:, :half] = x1 * cos - x2 * sin
    out[:, half:] = x1 * sin + x2 * cos
    return out.astype(np.float32)
