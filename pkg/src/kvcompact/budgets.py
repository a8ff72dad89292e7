"""
Nonuniform per-head budgets.

Sensitivity curves measure how a single head's compaction ratio moves the
reconstruction loss while every other head sits at a baseline ratio. Shares
are then allocated by greedy swaps: repeatedly move a share step from the
head with the cheapest marginal cost to the head with the largest marginal
gain until no swap improves the interpolated total loss.

Curves and schedules serialize as canonical JSON so model-specific schedules
can be precomputed once and reused across contexts and ratios.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_R0 = 0.05

HeadKey = Tuple[int, int]


@dataclass
class SensitivityCurve:
    head_id: HeadKey
    grid: List[float]
    loss: List[float]

    def __post_init__(self):
        self.head_id = (int(self.head_id[0]), int(self.head_id[1]))
        self.grid = [float(g) for g in self.grid]
        self.loss = [float(v) for v in self.loss]
        if len(self.grid) != len(self.loss) or not self.grid:
            raise ValueError("grid and loss must be nonempty, equal length")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("grid must be strictly increasing")


@dataclass
class BudgetSchedule:
    shares: Dict[HeadKey, float]
    r0: float = DEFAULT_R0

    def __post_init__(self):
        self.shares = {(int(k[0]), int(k[1])): float(v)
                       for k, v in self.shares.items()}
        if any(v < 0 for v in self.shares.values()):
            raise ValueError("shares must be nonnegative")
        total = sum(self.shares.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"shares must sum to 1, got {total}")


def interp_curve(curve: SensitivityCurve, rho: float) -> float:
    """Piecewise-linear loss at ratio rho; constant beyond the last point."""
    g = curve.grid
    if rho < g[0] - 1e-12:
        raise ValueError(f"rho={rho} below grid minimum {g[0]}")
    if rho >= g[-1]:
        return curve.loss[-1]
    return float(np.interp(rho, g, curve.loss))


def allocate_budgets(curves: Sequence[SensitivityCurve],
                     eta: Optional[float] = None,
                     r0: float = DEFAULT_R0,
                     max_swaps: int = 1_000_000) -> BudgetSchedule:
    """
    Greedy-swap share allocation from per-head sensitivity curves.

    Shares start uniform at 1/H. Each round maps shares to ratios
    rho_h = p_h * H * r0, evaluates marginal gains g+ (loss drop from one
    step up) and costs g- (loss rise from one step down) with step
    eta' = eta * H * r0 in ratio space, then moves eta of share from the
    min-cost head to the max-gain head while g+ > g-. Steps that would push
    a ratio above 1, below 0, or below a curve's measured range are
    infeasible. Default eta makes eta' = r0 / 4.
    """
    H = len(curves)
    if H < 2:
        raise ValueError("need at least two heads to allocate")
    if not 0.0 < r0 <= 1.0:
        raise ValueError("r0 must lie in (0, 1]")
    if eta is None:
        eta = 1.0 / (4 * H)
    if eta <= 0:
        raise ValueError("eta must be positive")
    eta_p = eta * H * r0
    grid_min = [c.grid[0] for c in curves]
    p = np.full(H, 1.0 / H)

    for _ in range(max_swaps):
        rho = p * H * r0
        g_up = np.full(H, -np.inf)
        g_down = np.full(H, np.inf)
        for h in range(H):
            if rho[h] + eta_p <= 1.0 + 1e-12:
                g_up[h] = interp_curve(curves[h], rho[h]) \
                    - interp_curve(curves[h], rho[h] + eta_p)
            if rho[h] - eta_p >= max(0.0, grid_min[h]) - 1e-12:
                g_down[h] = interp_curve(curves[h], rho[h] - eta_p) \
                    - interp_curve(curves[h], rho[h])
        b = int(np.argmax(g_up))
        g_down_masked = g_down.copy()
        g_down_masked[b] = np.inf
        a = int(np.argmin(g_down_masked))
        if not g_up[b] > g_down_masked[a]:
            break
        p[a] -= eta
        p[b] += eta
    else:
        raise RuntimeError("allocate_budgets failed to terminate")

    p = np.maximum(p, 0.0)
    p /= p.sum()
    return BudgetSchedule(shares={c.head_id: float(p[h])
                                  for h, c in enumerate(curves)}, r0=r0)


def total_loss(curves: Sequence[SensitivityCurve], shares: Sequence[float],
               r0: float) -> float:
    """Interpolated total loss of a share vector (used by tests/oracles)."""
    H = len(curves)
    return float(sum(interp_curve(c, s * H * r0)
                     for c, s in zip(curves, shares)))


def shares_to_counts(schedule: BudgetSchedule, overall_ratio: float,
                     T_per_head: Dict[HeadKey, int]) -> Dict[HeadKey, int]:
    """
    Convert shares into per-head key counts conserving the global budget.

    Ideal counts share_h * H * r * T_h are rescaled to sum to the global
    budget round(r * sum T_h), rounded by largest remainder, clamped into
    [1, T_h], and the residual rebalanced among unclamped heads.
    """
    if not 0.0 < overall_ratio <= 1.0:
        raise ValueError("overall_ratio must lie in (0, 1]")
    keys = sorted(schedule.shares)
    missing = [k for k in keys if k not in T_per_head]
    if missing:
        raise ValueError(f"missing head lengths: {missing}")
    H = len(keys)
    T = np.array([T_per_head[k] for k in keys], dtype=np.int64)
    budget = int(round(overall_ratio * int(T.sum())))
    if budget < H:
        raise ValueError(
            f"global budget {budget} below one key per head ({H})")
    ideal = np.array([schedule.shares[k] * H * overall_ratio * T_per_head[k]
                      for k in keys])
    total = ideal.sum()
    quota = ideal * (budget / total) if total > 0 \
        else np.full(H, budget / H)

    base = np.floor(quota).astype(np.int64)
    frac = quota - base
    remainder = budget - int(base.sum())
    order = sorted(range(H), key=lambda i: (-frac[i], i))
    for i in order[:remainder]:
        base[i] += 1

    counts = np.clip(base, 1, T)
    diff = budget - int(counts.sum())
    gap = quota - counts
    while diff != 0:
        if diff > 0:
            open_idx = [i for i in range(H) if counts[i] < T[i]]
            if not open_idx:
                raise ValueError("budget exceeds total capacity")
            i = max(open_idx, key=lambda i: (gap[i], -i))
            counts[i] += 1
            diff -= 1
        else:
            open_idx = [i for i in range(H) if counts[i] > 1]
            if not open_idx:
                raise ValueError("budget below minimum feasible")
            i = min(open_idx, key=lambda i: (gap[i], i))
            counts[i] -= 1
            diff += 1
        gap = quota - counts
    return {k: int(c) for k, c in zip(keys, counts)}


def linear_layer_shares(num_layers: int, kv_heads_per_layer: int,
                        first_to_last: float = 2.0,
                        r0: float = DEFAULT_R0) -> BudgetSchedule:
    """
    Linearly decreasing per-layer budget profile (equal within a layer):
    layer 0 gets `first_to_last` times the weight of the last layer.
    """
    if num_layers < 1 or kv_heads_per_layer < 1:
        raise ValueError("need at least one layer and head")
    if first_to_last <= 0:
        raise ValueError("first_to_last must be positive")
    if num_layers == 1:
        weights = np.ones(1)
    else:
        weights = np.linspace(first_to_last, 1.0, num_layers)
    shares = {}
    total = weights.sum() * kv_heads_per_layer
    for layer in range(num_layers):
        for head in range(kv_heads_per_layer):
            shares[(layer, head)] = float(weights[layer] / total)
    return BudgetSchedule(shares=shares, r0=r0)


def measure_sensitivity(cache, queries, heldout_queries, head_id: HeadKey,
                        grid: Sequence[float], baseline_ratio: float,
                        cfg) -> SensitivityCurve:
    """
    Sensitivity curve for one head: every other head compacts at
    baseline_ratio while head_id sweeps the grid; the recorded loss is the
    mean held-out output error over all heads, relative to the all-baseline
    configuration (0 at rho = baseline_ratio by construction).

    Heads compact independently, so the other heads' contribution is
    measured once and reused across grid points.
    """
    from .compaction import compact_head, _uniform_count
    from .metrics import output_error

    if head_id not in cache:
        raise ValueError(f"unknown head: {head_id}")
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("grid must be nonempty")
    H = len(cache)

    def head_err(key, ratio: float) -> float:
        t = _uniform_count(ratio, cache[key].T)
        ch = compact_head(cache[key], queries[key], t, cfg)
        mean, _ = output_error(cache[key], ch, heldout_queries[key].Q)
        return mean

    baseline_other = sum(head_err(key, baseline_ratio)
                         for key in sorted(cache) if key != head_id)
    baseline_target = head_err(head_id, baseline_ratio)
    baseline_total = (baseline_other + baseline_target) / H

    losses = []
    for rho in grid:
        total = (baseline_other + head_err(head_id, rho)) / H
        losses.append(total - baseline_total)
    return SensitivityCurve(head_id=head_id, grid=grid, loss=losses)


# ---------------------------------------------------------------------------
# Serialization

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def schedule_to_json(schedule: BudgetSchedule) -> str:
    return _canonical({
        "r0": schedule.r0,
        "shares": [{"layer": k[0], "head": k[1], "share": v}
                   for k, v in sorted(schedule.shares.items())],
    })


def schedule_from_json(text: str) -> BudgetSchedule:
    d = json.loads(text)
    shares = {(int(e["layer"]), int(e["head"])): float(e["share"])
              for e in d["shares"]}
    return BudgetSchedule(shares=shares, r0=float(d["r0"]))


def curves_to_json(curves: Sequence[SensitivityCurve]) -> str:
    return _canonical({
        "curves": [{"layer": c.head_id[0], "head": c.head_id[1],
                    "grid": c.grid, "loss": c.loss}
                   for c in sorted(curves, key=lambda c: c.head_id)],
    })


def curves_from_json(text: str) -> List[SensitivityCurve]:
    d = json.loads(text)
    return [SensitivityCurve(head_id=(int(e["layer"]), int(e["head"])),
                             grid=e["grid"], loss=e["loss"])
            for e in d["curves"]]
