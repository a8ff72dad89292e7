"""
Deterministic synthetic caches for tests and benchmarks.

"iid" heads draw keys/values i.i.d. standard normal. "clustered" heads hold
c distinct key rows duplicated evenly with per-cluster-constant values: an
exact compact solution with t = c keys and beta = log(cluster size) exists,
which makes them the exactness oracle for the pipeline.
"""
from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from .attention import HeadCache, QuerySet, RopeParams
from .queries import gen_random_queries

HeadKey = Tuple[int, int]


def _seq(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=tuple(key))


def synth_head(seed: int, layer: int, head: int, T: int, d: int,
               structure: str = "iid", clusters: int = 0,
               rope: Optional[RopeParams] = None) -> HeadCache:
    rng = np.random.Generator(np.random.Philox(_seq(seed, layer, head, 0)))
    if structure == "iid":
        K = rng.standard_normal((T, d))
        V = rng.standard_normal((T, d))
    elif structure == "clustered":
        if not 1 <= clusters <= T:
            raise ValueError("clusters must lie in [1, T]")
        centers = rng.standard_normal((clusters, d))
        values = rng.standard_normal((clusters, d))
        sizes = np.full(clusters, T // clusters)
        sizes[:T % clusters] += 1
        K = np.repeat(centers, sizes, axis=0)
        V = np.repeat(values, sizes, axis=0)
    else:
        raise ValueError(f"unknown structure: {structure!r}")
    return HeadCache(K=K.astype(np.float32), V=V.astype(np.float32),
                     rope=rope if rope is not None else RopeParams())


def synth_cache(seed: int, layers: int, heads: int, T: int, d: int,
                n_queries: int, structure: str = "iid", clusters: int = 0,
                n_heldout: int = 0
                ) -> Tuple[Dict[HeadKey, HeadCache],
                           Dict[HeadKey, QuerySet],
                           Dict[HeadKey, QuerySet]]:
    """Build per-head caches, fit queries, and optional held-out queries."""
    if min(layers, heads, T, d, n_queries) < 1:
        raise ValueError("layers, heads, T, d, n_queries must be >= 1")
    cache: Dict[HeadKey, HeadCache] = {}
    queries: Dict[HeadKey, QuerySet] = {}
    heldout: Dict[HeadKey, QuerySet] = {}
    for layer in range(layers):
        for head in range(heads):
            key = (layer, head)
            cache[key] = synth_head(seed, layer, head, T, d,
                                    structure, clusters)
            queries[key] = gen_random_queries(
                n_queries, d, seed=_seq(seed, layer, head, 1))
            if n_heldout > 0:
                heldout[key] = gen_random_queries(
                    n_heldout, d, seed=_seq(seed, layer, head, 2))
    return cache, queries, heldout


def parse_structure(text: str) -> Tuple[str, int]:
    """Parse "iid" or "clustered:<c>" CLI structure specs."""
    if text == "iid":
        return "iid", 0
    if text.startswith("clustered:"):
        return "clustered", int(text.split(":", 1)[1])
    raise ValueError(f"unknown structure spec: {text!r}")
