import itertools

import numpy as np
import pytest

from kvcompact.budgets import (BudgetSchedule, SensitivityCurve,
                               allocate_budgets, curves_from_json,
                               curves_to_json, interp_curve,
                               linear_layer_shares, measure_sensitivity,
                               schedule_from_json, schedule_to_json,
                               shares_to_counts, total_loss)
from kvcompact.compaction import CompactionConfig
from kvcompact.synth import synth_cache


def curve(head, grid, loss):
    return SensitivityCurve(head_id=head, grid=list(grid), loss=list(loss))


def lattice_optimum(curves, eta, r0, p0=None):
    """Exhaustive search over reachable share vectors (sum preserved)."""
    H = len(curves)
    base = np.full(H, 1.0 / H) if p0 is None else np.asarray(p0)
    span = int(np.ceil(1.0 / eta))
    best = None
    for moves in itertools.product(range(-span, span + 1), repeat=H - 1):
        z = np.array(list(moves) + [-sum(moves)])
        p = base + eta * z
        if np.any(p < -1e-12):
            continue
        rho = p * H * r0
        if np.any(rho > 1.0 + 1e-12):
            continue
        if np.any(rho < np.array([c.grid[0] for c in curves]) - 1e-12):
            continue
        loss = total_loss(curves, p, r0)
        if best is None or loss < best[0] - 1e-15:
            best = (loss, p.copy())
    return best


# ---------------------------------------------------------------------------
# interp_curve

def test_interp_grid_points_exact():
    c = curve((0, 0), [0.1, 0.5, 1.0], [3.0, 2.0, 1.5])
    for g, v in zip(c.grid, c.loss):
        assert interp_curve(c, g) == v


def test_interp_midpoint_mean():
    c = curve((0, 0), [0.2, 0.4], [1.0, 3.0])
    assert interp_curve(c, 0.3) == pytest.approx(2.0)


def test_interp_uneven_blend():
    c = curve((0, 0), [0.1, 0.7], [6.0, 0.0])
    # at 0.25: (0.7-0.25)/(0.7-0.1) * 6 = 4.5
    assert interp_curve(c, 0.25) == pytest.approx(4.5)


def test_interp_constant_extrapolation():
    c = curve((0, 0), [0.1, 0.5], [2.0, 0.5])
    assert interp_curve(c, 0.9) == 0.5
    assert interp_curve(c, 1.0) == 0.5


def test_interp_below_grid_raises():
    c = curve((0, 0), [0.2, 0.5], [1.0, 0.5])
    with pytest.raises(ValueError):
        interp_curve(c, 0.1)


# ---------------------------------------------------------------------------
# allocate_budgets

def test_allocate_identical_curves_stays_uniform():
    grid = [0.01, 0.05, 0.2, 0.6, 1.0]
    loss = [5.0, 3.0, 1.0, 0.4, 0.2]
    curves = [curve((0, h), grid, loss) for h in range(4)]
    sched = allocate_budgets(curves, r0=0.05)
    assert all(s == pytest.approx(0.25) for s in sched.shares.values())


def test_allocate_flat_vs_decreasing():
    grid = [0.0125, 0.05, 0.1, 0.5, 1.0]
    flat = curve((0, 0), grid, [1.0] * 5)
    steep = curve((0, 1), grid, [4.0, 3.5, 3.0, 1.0, 0.0])
    sched = allocate_budgets([flat, steep], r0=0.05)
    # all transferable share flows to the steep head until the flat head
    # hits the step floor in ratio space
    assert sched.shares[(0, 1)] > sched.shares[(0, 0)]
    eta = 1.0 / (4 * 2)  # default: eta' = r0/4
    floor_steps = round(sched.shares[(0, 0)] / eta)
    assert floor_steps in (0, 1)
    assert sched.shares[(0, 0)] + sched.shares[(0, 1)] == pytest.approx(1.0)


def test_allocate_three_heads_matches_lattice_optimum():
    grid = [0.0125, 0.05, 0.1, 0.3, 1.0]
    curves = [
        curve((0, 0), grid, [2.00, 1.60, 1.30, 0.70, 0.10]),
        curve((0, 1), grid, [0.50, 0.45, 0.40, 0.30, 0.20]),
        curve((0, 2), grid, [3.00, 2.20, 1.70, 0.80, 0.05]),
    ]
    r0 = 0.05
    eta = 1.0 / 12  # eta' = r0/4
    sched = allocate_budgets(curves, eta=eta, r0=r0)
    got = np.array([sched.shares[c.head_id] for c in curves])
    best_loss, best_p = lattice_optimum(curves, eta, r0)
    assert total_loss(curves, got, r0) == pytest.approx(best_loss, abs=1e-12)
    assert np.allclose(got, best_p, atol=1e-12)


def test_allocate_local_optimality_at_termination():
    rng = np.random.default_rng(0)
    grid = [0.0125, 0.05, 0.2, 0.6, 1.0]
    curves = []
    for h in range(4):
        drop = np.sort(rng.uniform(0.1, 3.0, 5))[::-1]
        curves.append(curve((0, h), grid, drop))
    r0, H = 0.05, 4
    eta = 1.0 / (4 * H)
    eta_p = eta * H * r0
    sched = allocate_budgets(curves, eta=eta, r0=r0)
    p = np.array([sched.shares[c.head_id] for c in curves])
    base = total_loss(curves, p, r0)
    for a in range(H):
        for b in range(H):
            if a == b:
                continue
            q = p.copy()
            q[a] -= eta
            q[b] += eta
            rho = q * H * r0
            if np.any(q < -1e-12) or np.any(rho > 1 + 1e-12) \
                    or np.any(rho < grid[0] - 1e-12):
                continue
            assert total_loss(curves, q, r0) >= base - 1e-12


def test_allocate_shares_always_sum_to_one():
    rng = np.random.default_rng(1)
    grid = [0.0125, 0.1, 0.5, 1.0]
    for trial in range(5):
        curves = [curve((0, h), grid,
                        np.sort(rng.uniform(0, 2, 4))[::-1])
                  for h in range(3)]
        sched = allocate_budgets(curves, r0=0.05)
        assert sum(sched.shares.values()) == pytest.approx(1.0, abs=1e-9)


def test_allocate_validation():
    c = curve((0, 0), [0.1, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        allocate_budgets([c], r0=0.05)
    with pytest.raises(ValueError):
        allocate_budgets([c, c], r0=0.0)


# ---------------------------------------------------------------------------
# shares_to_counts

def test_counts_uniform():
    sched = BudgetSchedule(shares={(0, 0): 0.5, (0, 1): 0.5}, r0=0.5)
    counts = shares_to_counts(sched, 0.5, {(0, 0): 8, (0, 1): 8})
    assert counts == {(0, 0): 4, (0, 1): 4}


def test_counts_weighted_example():
    sched = BudgetSchedule(shares={(0, 0): 0.75, (0, 1): 0.25}, r0=0.5)
    counts = shares_to_counts(sched, 0.5, {(0, 0): 8, (0, 1): 8})
    assert counts == {(0, 0): 6, (0, 1): 2}


def test_counts_minimum_budget_all_ones():
    sched = BudgetSchedule(shares={(0, 0): 0.9, (0, 1): 0.1}, r0=0.5)
    counts = shares_to_counts(sched, 2 / 16, {(0, 0): 8, (0, 1): 8})
    assert counts == {(0, 0): 1, (0, 1): 1}


def test_counts_conserve_budget():
    rng = np.random.default_rng(2)
    for trial in range(20):
        H = int(rng.integers(2, 6))
        shares = rng.dirichlet(np.ones(H))
        T = {(0, h): int(rng.integers(4, 40)) for h in range(H)}
        sched = BudgetSchedule(shares={(0, h): float(shares[h])
                                       for h in range(H)}, r0=0.05)
        r = float(rng.uniform(0.2, 1.0))
        budget = round(r * sum(T.values()))
        if budget < H:
            continue
        counts = shares_to_counts(sched, r, T)
        assert sum(counts.values()) == budget
        assert all(1 <= counts[k] <= T[k] for k in T)


def test_counts_infeasible_budget():
    sched = BudgetSchedule(shares={(0, 0): 0.5, (0, 1): 0.5}, r0=0.05)
    with pytest.raises(ValueError):
        shares_to_counts(sched, 1 / 16, {(0, 0): 8, (0, 1): 8})


# ---------------------------------------------------------------------------
# measure_sensitivity

def test_sensitivity_zero_at_baseline():
    cache, queries, heldout = synth_cache(seed=3, layers=1, heads=2, T=16,
                                          d=4, n_queries=48, n_heldout=32)
    cfg = CompactionConfig(method="omp")
    c = measure_sensitivity(cache, queries, heldout, (0, 0),
                            grid=[0.25, 0.5, 1.0], baseline_ratio=0.5,
                            cfg=cfg)
    idx = c.grid.index(0.5)
    assert c.loss[idx] == 0.0


def test_sensitivity_flat_for_duplicated_keys():
    cache, queries, heldout = synth_cache(seed=4, layers=1, heads=2, T=12,
                                          d=4, n_queries=48,
                                          structure="clustered", clusters=1,
                                          n_heldout=32)
    cfg = CompactionConfig(method="omp")
    c = measure_sensitivity(cache, queries, heldout, (0, 0),
                            grid=[0.25, 0.5, 1.0], baseline_ratio=0.25,
                            cfg=cfg)
    assert max(abs(v) for v in c.loss) < 1e-4


def test_sensitivity_monotone_on_average():
    # loss non-increasing in rho for iid heads, statistically over seeds
    cfg = CompactionConfig(method="omp")
    grid = [0.125, 0.25, 0.5, 0.75, 1.0]
    acc = np.zeros(len(grid))
    for seed in range(20):
        cache, queries, heldout = synth_cache(seed=100 + seed, layers=1,
                                              heads=1, T=16, d=4,
                                              n_queries=64, n_heldout=48)
        c = measure_sensitivity(cache, queries, heldout, (0, 0), grid,
                                baseline_ratio=0.5, cfg=cfg)
        acc += np.array(c.loss)
    acc /= 20
    assert np.all(np.diff(acc) <= 1e-3)


def test_sensitivity_unknown_head():
    cache, queries, heldout = synth_cache(seed=5, layers=1, heads=1, T=8,
                                          d=4, n_queries=8, n_heldout=8)
    with pytest.raises(ValueError):
        measure_sensitivity(cache, queries, heldout, (3, 3), [0.5], 0.5,
                            CompactionConfig())


# ---------------------------------------------------------------------------
# serialization & generators

def test_schedule_json_roundtrip():
    sched = BudgetSchedule(shares={(0, 0): 0.25, (1, 1): 0.75}, r0=0.05)
    text = schedule_to_json(sched)
    back = schedule_from_json(text)
    assert back.shares == sched.shares
    assert back.r0 == sched.r0
    assert schedule_to_json(back) == text  # canonical


def test_curves_json_roundtrip():
    curves = [curve((0, 1), [0.1, 0.5], [1.0, 0.2]),
              curve((1, 0), [0.1, 0.5], [2.0, 0.4])]
    text = curves_to_json(curves)
    back = curves_from_json(text)
    assert [c.head_id for c in back] == [(0, 1), (1, 0)]
    assert curves_to_json(back) == text


def test_linear_layer_shares():
    sched = linear_layer_shares(4, 2, first_to_last=2.0)
    assert sum(sched.shares.values()) == pytest.approx(1.0)
    per_layer = [sched.shares[(l, 0)] for l in range(4)]
    assert per_layer[0] == pytest.approx(2.0 * per_layer[-1])
    assert all(a > b for a, b in zip(per_layer, per_layer[1:]))
    assert sched.shares[(2, 0)] == sched.shares[(2, 1)]


def test_schedule_validation():
    with pytest.raises(ValueError):
        BudgetSchedule(shares={(0, 0): 0.4, (0, 1): 0.4}, r0=0.05)
    with pytest.raises(ValueError):
        BudgetSchedule(shares={(0, 0): -0.5, (0, 1): 1.5}, r0=0.05)
    with pytest.raises(ValueError):
        SensitivityCurve(head_id=(0, 0), grid=[0.5, 0.4], loss=[1, 2])
