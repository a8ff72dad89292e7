"""
Reconstruction metrics and brute-force oracles.

Errors compare a compacted head against its original on test queries:
relative L2 of attention outputs (with a 1e-12 floor) and relative mass
error evaluated in shifted space so long contexts cannot overflow.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .attention import CompactHead, HeadCache, attn_mass, attn_output
from .selection import MassFeatures
from .solvers import BoxBounds, solve_lstsq

EPS = 1e-12
ORACLE_MAX_T = 12


@dataclass
class ReconReport:
    output_err_mean: float
    output_err_p95: float
    mass_relerr_mean: float
    mass_relerr_p95: float
    n_queries: int

    def to_dict(self) -> dict:
        return {
            "output_err_mean": self.output_err_mean,
            "output_err_p95": self.output_err_p95,
            "mass_relerr_mean": self.mass_relerr_mean,
            "mass_relerr_p95": self.mass_relerr_p95,
            "n_queries": self.n_queries,
        }


def _summary(errs: np.ndarray) -> Tuple[float, float]:
    return float(errs.mean()), float(np.percentile(errs, 95))


def output_errors(head: HeadCache, compact: CompactHead,
                  Q_test: np.ndarray,
                  scale: Optional[float] = None) -> np.ndarray:
    """Per-query relative L2 between original and compacted outputs."""
    o = attn_output(Q_test, head.K, head.V, beta=head.beta, scale=scale) \
        .astype(np.float64)
    c = attn_output(Q_test, compact.C_k, compact.C_v, beta=compact.beta,
                    scale=scale).astype(np.float64)
    num = np.linalg.norm(o - c, axis=1)
    den = np.linalg.norm(o, axis=1) + EPS
    return num / den


def output_error(head: HeadCache, compact: CompactHead, Q_test: np.ndarray,
                 scale: Optional[float] = None) -> Tuple[float, float]:
    """(mean, p95) relative output error over the test queries."""
    return _summary(output_errors(head, compact, Q_test, scale))


def mass_relerrs(head: HeadCache, compact: CompactHead, Q_test: np.ndarray,
                 scale: Optional[float] = None) -> np.ndarray:
    """Per-query |M_hat - M| / M with a shared shift per query."""
    m_o, l_o = attn_mass(Q_test, head.K, beta=head.beta, scale=scale)
    m_c, l_c = attn_mass(Q_test, compact.C_k, beta=compact.beta, scale=scale)
    s = np.maximum(l_o, l_c)
    orig = m_o * np.exp(l_o - s)
    comp = m_c * np.exp(l_c - s)
    return np.abs(comp - orig) / orig


def mass_error(head: HeadCache, compact: CompactHead, Q_test: np.ndarray,
               scale: Optional[float] = None) -> Tuple[float, float]:
    """(mean, p95) relative mass error over the test queries."""
    return _summary(mass_relerrs(head, compact, Q_test, scale))


def reconstruction_report(head: HeadCache, compact: CompactHead,
                          Q_test: np.ndarray,
                          scale: Optional[float] = None) -> ReconReport:
    out_mean, out_p95 = output_error(head, compact, Q_test, scale)
    mass_mean, mass_p95 = mass_error(head, compact, Q_test, scale)
    return ReconReport(output_err_mean=out_mean, output_err_p95=out_p95,
                       mass_relerr_mean=mass_mean, mass_relerr_p95=mass_p95,
                       n_queries=int(np.asarray(Q_test).shape[0]))


def oracle_best_subset_mass(features: MassFeatures, t: int,
                            bounds: Optional[BoxBounds] = None
                            ) -> Tuple[Tuple[int, ...], np.ndarray, float]:
    """
    Exhaustive best size-t subset for mass matching (test oracle).

    Solves clamped least squares on every subset and returns the
    minimum-residual (S, w, residual); ties go to the lexicographically
    smallest S. Enforces T <= 12 to keep the enumeration tractable.
    """
    from .selection import OMP_BOUNDS
    if bounds is None:
        bounds = OMP_BOUNDS
    Phi = np.asarray(features.Phi, dtype=np.float64)
    m = np.asarray(features.m, dtype=np.float64)
    T = Phi.shape[1]
    if T > ORACLE_MAX_T:
        raise ValueError(f"T={T} too large for exhaustive search")
    if not 1 <= t <= T:
        raise ValueError(f"t={t} out of range")
    best = None
    for S in itertools.combinations(range(T), t):
        w = bounds.clamp(solve_lstsq(Phi[:, S], m))
        res = float(np.linalg.norm(Phi[:, S] @ w - m))
        if best is None or res < best[2]:
            best = (S, w, res)
    return best


# ---------------------------------------------------------------------------
# Report serialization

def reports_to_json(reports: Dict[Tuple[int, int], ReconReport]) -> str:
    doc = {"heads": [dict(layer=k[0], head=k[1], **r.to_dict())
                     for k, r in sorted(reports.items())]}
    if reports:
        doc["aggregate"] = {
            "output_err_mean": float(np.mean(
                [r.output_err_mean for r in reports.values()])),
            "mass_relerr_mean": float(np.mean(
                [r.mass_relerr_mean for r in reports.values()])),
        }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def reports_to_csv(reports: Dict[Tuple[int, int], ReconReport], path) -> None:
    fields = ["layer", "head", "output_err_mean", "output_err_p95",
              "mass_relerr_mean", "mass_relerr_p95", "n_queries"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for (layer, head), r in sorted(reports.items()):
            writer.writerow(dict(layer=layer, head=head, **r.to_dict()))
