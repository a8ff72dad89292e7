"""
Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines alongside the pytest verdicts.
"""
import itertools
import math
import time

import numpy as np
import pytest

from kvcompact.attention import (HeadCache, attn_mass, attn_output,
                                 concat_attn, rope_rotate, scaled_logits,
                                 true_mass, RopeParams)
from kvcompact.budgets import (BudgetSchedule, SensitivityCurve,
                               allocate_budgets, total_loss)
from kvcompact.cli import run as cli_run
from kvcompact.compaction import (ChunkPlan, CompactionConfig, compact_cache,
                                  compact_chunked, compact_head)
from kvcompact.container import load_compact
from kvcompact.metrics import (mass_error, oracle_best_subset_mass,
                               output_error)
from kvcompact.queries import gen_random_queries
from kvcompact.selection import (mass_features, score_keys, select_omp,
                                 select_topk, selection_residual)
from kvcompact.solvers import BoxBounds, solve_lstsq, solve_nnls_pgd
from kvcompact.synth import synth_cache


def report(name: str, ok: bool, detail: str = ""):
    verdict = "PASS" if ok else "FAIL"
    print(f"[{verdict}] {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------

def test_decomposition_identity():
    start = time.monotonic()
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(10_000 + seed)
        T = int(rng.integers(4, 65))
        d = int(rng.integers(2, 33))
        n = int(rng.integers(1, 33))
        nblocks = int(rng.integers(2, 5))
        Q = rng.standard_normal((n, d)).astype(np.float32)
        K = rng.standard_normal((T, d)).astype(np.float32)
        V = rng.standard_normal((T, d)).astype(np.float32)
        k_cuts = min(nblocks - 1, T - 1)
        cuts = np.sort(rng.choice(np.arange(1, T), size=k_cuts,
                                  replace=False))
        edges = [0, *cuts.tolist(), T]
        blocks = [(K[a:b], V[a:b], None) for a, b in zip(edges, edges[1:])]
        full = attn_output(Q, K, V)
        mix = concat_attn(Q, blocks)
        rel = np.abs(mix - full).max() / (np.abs(full).max() + 1e-12)
        worst = max(worst, float(rel))
    elapsed = time.monotonic() - start
    report("decomposition identity (200 instances, 1e-5 rel, <10s)",
           worst < 1e-5 and elapsed < 10.0,
           f"worst={worst:.2e}, {elapsed:.2f}s")


def test_mass_underestimation():
    ok = True
    for seed in range(100):
        rng = np.random.default_rng(11_000 + seed)
        T = int(rng.integers(2, 33))
        d = int(rng.integers(2, 17))
        n = int(rng.integers(1, 17))
        K = rng.standard_normal((T, d)).astype(np.float32)
        Q = rng.standard_normal((n, d)).astype(np.float32)
        S = np.sort(rng.choice(T, size=int(rng.integers(1, T + 1)),
                               replace=False))
        L = scaled_logits(Q, K).astype(np.float64)
        for i in range(n):
            s = L[i].max()
            full = math.fsum(math.exp(x - s) for x in L[i])
            sub = math.fsum(math.exp(L[i, j] - s) for j in S)
            ok &= sub <= full
    report("mass underestimation (100 subset pairs, exact)", ok)


def test_multiplicity_bias_identity():
    worst_mass = 0.0
    outputs_ok = True
    for seed in range(100):
        rng = np.random.default_rng(12_000 + seed)
        d = int(rng.integers(2, 17))
        u = int(rng.integers(1, 9))
        mult = rng.integers(1, 7, size=u)
        keys = rng.standard_normal((u, d)).astype(np.float32)
        vals = rng.standard_normal((u, d)).astype(np.float32)
        K = np.repeat(keys, mult, axis=0)
        V = np.repeat(vals, mult, axis=0)
        Q = rng.standard_normal((16, d)).astype(np.float32)
        beta = np.log(mult.astype(np.float64)).astype(np.float32)
        m_dup, l_dup = attn_mass(Q, K)
        m_b, l_b = attn_mass(Q, keys, beta=beta)
        rel = np.abs(true_mass(m_b, l_b) - true_mass(m_dup, l_dup)) \
            / true_mass(m_dup, l_dup)
        worst_mass = max(worst_mass, float(rel.max()))
        o_dup = attn_output(Q, K, V)
        o_b = attn_output(Q, keys, vals, beta=beta)
        outputs_ok &= np.allclose(o_dup, o_b, rtol=1e-6, atol=1e-6)
    report("multiplicity/bias identity (100 instances, 1e-6)",
           worst_mass < 1e-6 and outputs_ok, f"mass={worst_mass:.2e}")


def test_solver_contracts():
    rng = np.random.default_rng(13_000)
    lstsq_ok = True
    for _ in range(50):
        X = rng.standard_normal((40, 8))
        Y = rng.standard_normal((40, 5))
        M = solve_lstsq(X, Y)
        resid = np.linalg.norm(X.T @ (X @ M - Y))
        lstsq_ok &= resid <= 1e-4 * (1.0 + np.linalg.norm(X.T @ Y))

    pgd_ok = True
    for case in range(100):
        r = np.random.default_rng(13_100 + case)
        n, t = 16, 5
        M = np.abs(r.standard_normal((n, t)))
        y = M @ np.abs(r.standard_normal(t)) + 0.1 * r.standard_normal(n)
        bounds = BoxBounds(lower=1e-6,
                           upper=math.exp(3.0) if case % 2 else None)
        prev = None
        for iters in range(0, 10):
            w = solve_nnls_pgd(M, y, iters=iters, bounds=bounds)
            pgd_ok &= bool(np.all(w >= bounds.lower))
            if bounds.upper is not None:
                pgd_ok &= bool(np.all(w <= bounds.upper))
            obj = 0.5 * float(np.sum((M @ w - y) ** 2))
            if prev is not None:
                pgd_ok &= obj <= prev + 1e-7
            prev = obj

    grid_ok = True
    for case in range(20):
        r = np.random.default_rng(13_200 + case)
        t = int(r.integers(1, 4))
        M = np.abs(r.standard_normal((16, t)))
        y = np.abs(r.standard_normal(16))
        y /= np.linalg.norm(y)
        bounds = BoxBounds(lower=1e-6, upper=4.0)
        w = solve_nnls_pgd(M, y, iters=200, bounds=bounds)
        axes = [np.linspace(bounds.lower, bounds.upper, 40)] * t
        best = min(0.5 * float(np.sum((M @ np.array(pt) - y) ** 2))
                   for pt in itertools.product(*axes))
        grid_ok &= 0.5 * float(np.sum((M @ w - y) ** 2)) <= best + 1e-2

    report("solver contracts (lstsq residual, PGD descent, grid oracle)",
           lstsq_ok and pgd_ok and grid_ok)


def test_omp_quality():
    # (a) OMP <= highest-attention+beta mass residual at equal budget
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(14_000 + seed)
        T, t, n, d = 64, 8, 256, 16
        Q = rng.standard_normal((n, d)).astype(np.float32)
        K = rng.standard_normal((T, d)).astype(np.float32)
        feats = mass_features(Q, K)
        omp = selection_residual(feats, select_omp(feats, t).S)
        hak = selection_residual(
            feats, select_topk(score_keys(Q, K, agg="rms"), t).S)
        wins += omp <= hak + 1e-9
    # (b) within 1.5x of exhaustive best subset on small sharp instances
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(14_500 + seed)
        T = int(rng.integers(3, 9))
        t = int(rng.integers(1, 3))
        n = int(rng.integers(2, 17))
        Q = (4.0 * rng.standard_normal((n, 8))).astype(np.float32)
        K = rng.standard_normal((T, 8)).astype(np.float32)
        feats = mass_features(Q, K)
        omp = selection_residual(feats, select_omp(feats, t).S)
        _, _, best = oracle_best_subset_mass(feats, t)
        hits += omp <= 1.5 * best + 1e-9
    report("OMP quality (vs HAK+beta >=90/100; vs exhaustive >=90/100)",
           wins >= 90 and hits >= 90, f"hak wins {wins}, oracle hits {hits}")


def _structured_instance(seed, T=120, d=16, n=256, n_test=256):
    rng = np.random.default_rng(seed)
    c = 18
    centers = rng.standard_normal((c, d))
    assign = rng.integers(0, c, T)
    K = centers[assign] + 0.25 * rng.standard_normal((T, d))
    V = centers[assign] @ rng.standard_normal((d, d)) / np.sqrt(d) \
        + 0.25 * rng.standard_normal((T, d))
    head = HeadCache(K=K.astype(np.float32), V=V.astype(np.float32))
    from kvcompact.attention import QuerySet
    qs = QuerySet(rng.standard_normal((n, d)).astype(np.float32))
    Q_test = rng.standard_normal((n_test, d)).astype(np.float32)
    return head, qs, Q_test


def test_ablation_ordering():
    sel, selb, full = [], [], []
    strict = 0
    configs = {
        "sel": CompactionConfig(method="selection_only", ratio=0.1),
        "selb": CompactionConfig(method="highest_attention", ratio=0.1,
                                 value_mode="original"),
        "full": CompactionConfig(method="highest_attention", ratio=0.1),
    }
    for seed in range(50):
        head, qs, Q_test = _structured_instance(15_000 + seed)
        t = max(1, round(0.1 * head.T))
        errs = {}
        for name, cfg in configs.items():
            ch = compact_head(head, qs, t, cfg)
            errs[name], _ = output_error(head, ch, Q_test)
        sel.append(errs["sel"])
        selb.append(errs["selb"])
        full.append(errs["full"])
        strict += errs["full"] < errs["sel"]
    mean_sel, mean_selb, mean_full = map(np.mean, (sel, selb, full))
    ok = mean_sel >= mean_selb >= mean_full and strict >= 48  # 95% of 50
    report("ablation ordering at ratio 0.1 (sel_only >= sel+beta >= full)",
           ok, f"means {mean_sel:.3f} >= {mean_selb:.3f} >= "
               f"{mean_full:.3f}, strict {strict}/50")


def test_exactness_oracle():
    ok = True
    details = []
    for c, T in [(2, 8), (3, 12), (4, 32)]:
        cache, queries, heldout = synth_cache(
            seed=16_000 + c, layers=1, heads=1, T=T, d=8, n_queries=128,
            structure="clustered", clusters=c, n_heldout=64)
        head = cache[(0, 0)]
        ch = compact_head(head, queries[(0, 0)], c,
                          CompactionConfig(method="omp"))
        out_err, _ = output_error(head, ch, heldout[(0, 0)].Q)
        m_err, _ = mass_error(head, ch, heldout[(0, 0)].Q)
        ok &= out_err < 1e-4 and m_err < 1e-4
        details.append(f"c={c}: out={out_err:.1e} mass={m_err:.1e}")
    report("exactness oracle (clustered synth, t = clusters)", ok,
           "; ".join(details))


def test_budget_allocator():
    grid = [0.0125, 0.05, 0.1, 0.3, 1.0]
    curves = [
        SensitivityCurve((0, 0), grid, [2.00, 1.60, 1.30, 0.70, 0.10]),
        SensitivityCurve((0, 1), grid, [0.50, 0.45, 0.40, 0.30, 0.20]),
        SensitivityCurve((0, 2), grid, [3.00, 2.20, 1.70, 0.80, 0.05]),
    ]
    r0, eta = 0.05, 1.0 / 12
    start = time.monotonic()
    sched = allocate_budgets(curves, eta=eta, r0=r0)
    elapsed = time.monotonic() - start
    got = np.array([sched.shares[c.head_id] for c in curves])
    # exhaustive search of the reachable share lattice
    best = None
    span = int(np.ceil(1.0 / eta))
    for z0 in range(-span, span + 1):
        for z1 in range(-span, span + 1):
            z = np.array([z0, z1, -(z0 + z1)])
            p = 1.0 / 3 + eta * z
            rho = p * 3 * r0
            if np.any(p < -1e-12) or np.any(rho > 1 + 1e-12) \
                    or np.any(rho < grid[0] - 1e-12):
                continue
            loss = total_loss(curves, p, r0)
            if best is None or loss < best - 1e-15:
                best = loss
    achieved = total_loss(curves, got, r0)
    ok = (abs(achieved - best) < 1e-12 and elapsed < 1.0
          and abs(sum(sched.shares.values()) - 1.0) < 1e-9)
    report("budget allocator (H=3 exact lattice optimum, <1s, shares sum 1)",
           ok, f"loss {achieved:.6f} vs optimum {best:.6f}, {elapsed:.3f}s")


def test_chunking():
    cache, queries, _ = synth_cache(seed=17_000, layers=1, heads=2, T=16,
                                    d=8, n_queries=64)
    cfg = CompactionConfig(method="omp", ratio=0.5)
    whole = compact_cache(cache, queries, cfg)
    single = compact_chunked(cache, ChunkPlan(spans=[(0, 16)]), [queries],
                             cfg)
    bit_ok = all(
        single[k].C_k.tobytes() == whole[k].C_k.tobytes()
        and single[k].beta.tobytes() == whole[k].beta.tobytes()
        and single[k].C_v.tobytes() == whole[k].C_v.tobytes()
        for k in whole)

    plan = ChunkPlan(spans=[(0, 8), (8, 16)])
    kv = compact_chunked(cache, plan, [queries, queries], cfg,
                         mode="kv_based")
    chunk_caches = []
    for start, end in plan.spans:
        chunk_caches.append({
            k: HeadCache(K=hc.K[start:end], V=hc.V[start:end],
                         positions=np.arange(start, end))
            for k, hc in cache.items()})
    text = compact_chunked(cache, plan, [queries, queries], cfg,
                           mode="text_based", chunk_caches=chunk_caches)
    text_ok = all(text[k].C_k.tobytes() == kv[k].C_k.tobytes()
                  for k in kv)

    rng = np.random.default_rng(17_001)
    K = rng.standard_normal((6, 12)).astype(np.float32)
    rope = RopeParams()
    comp = rope_rotate(rope_rotate(K, 11, rope), 31, rope)
    direct = rope_rotate(K, 42, rope)
    rope_ok = bool(np.allclose(comp, direct, atol=1e-6))

    report("chunking (single-span bit-match, text delta=0, rope compose)",
           bit_ok and text_ok and rope_ok)


def test_cli_determinism(tmp_path):
    def synth(out, seed=5):
        assert cli_run(["synth", "--seed", str(seed), "--layers", "1",
                        "--heads", "2", "--tokens", "16", "--head-dim", "8",
                        "--n-queries", "48", "--n-heldout", "16",
                        "--output", str(out),
                        "--heldout-output", str(out) + ".held"]) == 0

    ok = True
    a, b = tmp_path / "a.kvc", tmp_path / "b.kvc"
    synth(a)
    synth(b)
    ok &= a.read_bytes() == b.read_bytes()

    for method in ("omp", "omp-fast", "hak", "selection-only"):
        outs = []
        for tag, threads in (("1", "1"), ("2", "1"), ("4", "4")):
            out = tmp_path / f"{method}{tag}.kvc"
            assert cli_run(["compact", "--input", str(a), "--ratio", "0.5",
                            "--method", method, "--threads", threads,
                            "--output", str(out)]) == 0
            outs.append(out.read_bytes())
        ok &= outs[0] == outs[1] == outs[2]

    for tag in ("x", "y"):
        assert cli_run(["chunk-compact", "--input", str(a), "--ratio", "0.5",
                        "--method", "omp", "--spans", "0:8,8:16",
                        "--output", str(tmp_path / f"ch{tag}.kvc")]) == 0
    ok &= (tmp_path / "chx.kvc").read_bytes() \
        == (tmp_path / "chy.kvc").read_bytes()

    for tag in ("u", "v"):
        assert cli_run(["sensitivity", "--input", str(a), "--heldout",
                        str(a) + ".held", "--head", "0,0", "--head", "0,1",
                        "--grid", "0.25,0.5,1.0", "--baseline", "0.5",
                        "--output", str(tmp_path / f"curves{tag}.json")]) == 0
        assert cli_run(["budget", "--curves",
                        str(tmp_path / f"curves{tag}.json"), "--r0", "0.5",
                        "--output", str(tmp_path / f"sched{tag}.json")]) == 0
        assert cli_run(["eval", "--original", str(a), "--compact",
                        str(tmp_path / "omp1.kvc"), "--output",
                        str(tmp_path / f"rep{tag}.json")]) == 0
    ok &= (tmp_path / "curvesu.json").read_bytes() \
        == (tmp_path / "curvesv.json").read_bytes()
    ok &= (tmp_path / "schedu.json").read_bytes() \
        == (tmp_path / "schedv.json").read_bytes()
    ok &= (tmp_path / "repu.json").read_bytes() \
        == (tmp_path / "repv.json").read_bytes()

    report("CLI determinism (bit-stable across runs and thread counts)", ok)
