"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The long replication studies are module-scoped fixtures shared by the
criteria that read them. Expect roughly six minutes on one core.
"""

import math

import numpy as np
import pytest

import reference as ref
from _criteria import record_criterion
from helpers import toy_dataset
from robustq.bootstrap import (MULTIPLIER_KINDS, combined_radius, conditional_radius,
                               draw_multipliers, draw_stream, one_bootstrap_draw, run_bootstrap)
from robustq.data import ModelSet, make_folds
from robustq.engine import RESIDUAL_LOG, FitConfig, GramPair, StageFit, fit_two_stage
from robustq.inference import restricted_ls, stage_intervals
from robustq.selection import SelectorSpec
from robustq.simulation import (SimConfig, TrueFunctions, generate_scenario, oracle_estimator,
                                run_replications, scenario)

ALPHA = 0.05
MC_BOUND = ALPHA + 2 * math.sqrt(ALPHA * (1 - ALPHA) / 200)
SEED = 1


def _study(label, n, reps, B):
    cfg = SimConfig(n=n, B=B, alpha=ALPHA)
    return run_replications(scenario(label, n=n), reps, cfg, seed=SEED)


@pytest.fixture(scope="module")
def inequality_runs():
    return {label: _study(label, 500, 50, 500) for label in ("C", "F")}


@pytest.fixture(scope="module")
def fcr_run():
    return _study("C", 1000, 200, 500)


@pytest.fixture(scope="module")
def null_run():
    return _study("F", 1000, 200, 500)


def _stage_records(*runs):
    for _, results in runs:
        for r in results:
            for s in (2, 1):
                yield r["stages"][s]


def test_criterion_01_deterministic_inequalities(inequality_runs):
    checked = violations = 0
    worst = -np.inf
    for st in _stage_records(*inequality_runs.values()):
        if "ineq_ok" not in st:
            continue
        checked += 1
        violations += int(not st["ineq_ok"])
        worst = max(worst, st["ineq_lhs"] - st["ineq_bound"])
    ok = violations == 0 and checked == 2 * 50 * 2
    record_criterion(1, ok, f"{checked} stage checks on C,F (n=500, 50 reps), "
                            f"{violations} violations, max lhs-bound={worst:.3e}")
    assert ok


def test_criterion_03_restricted_ls_identity():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 9))
        A = rng.normal(size=(k, k))
        h = A @ A.T + rng.uniform(0.05, 1.0) * np.eye(k)
        theta = rng.normal(size=k)
        fit = StageFit(1, ModelSet.full(k, 1), theta, GramPair(h @ theta, h, 1))
        j, t = int(rng.integers(0, k)), float(rng.normal(scale=2.0))
        K = np.zeros((k + 1, k + 1))
        K[:k, :k] = h
        K[:k, k] = K[k, :k] = np.eye(k)[j]
        kkt = np.linalg.solve(K, np.concatenate([fit.gram.g, [t]]))[:k]
        worst = max(worst, float(np.max(np.abs(restricted_ls(fit, j, t) - kkt))))
    ok = worst <= 1e-8
    record_criterion(3, ok, f"1000 random PD instances, max deviation from KKT oracle {worst:.2e}")
    assert ok


def test_criterion_04_interval_dominance(inequality_runs, fcr_run, null_run):
    recs = list(_stage_records(*inequality_runs.values(), fcr_run, null_run))
    bad = sum(not st["dominance_ok"] for st in recs)
    record_criterion(4, bad == 0, f"{len(recs)} fitted stage models, {bad} dominance failures "
                                  "(strict where the inverse row has off-diagonal mass)")
    assert bad == 0


def test_criterion_05_conditional_below_combined(inequality_runs, fcr_run, null_run):
    recs = list(_stage_records(*inequality_runs.values(), fcr_run, null_run))
    bad = sum(not st["cond_le_comb"] for st in recs)
    record_criterion(5, bad == 0, f"{len(recs)} stage records, {bad} with conditional radius or "
                                  "length above combined")
    assert bad == 0


def test_criterion_06_oracle_degeneration():
    mismatches = 0
    for i in range(20):
        spec = scenario("ABC"[i % 3])
        ds = generate_scenario(spec, 600 + i, n=300)
        full = tuple(range(ds.phi1.shape[1]))
        cfg = FitConfig(seed=i, selector2=SelectorSpec(kind="fixed", model=full),
                        selector1=SelectorSpec(kind="fixed", model=full),
                        **TrueFunctions(spec).oracle_learners())
        fit = fit_two_stage(ds, cfg)
        t2, t1, pseudo = oracle_estimator(ds, spec, ModelSet(full, 2), ModelSet(full, 1))
        same = (np.array_equal(fit.stage2.theta, t2) and np.array_equal(fit.stage1.theta, t1)
                and np.array_equal(fit.pseudo_outcomes, pseudo))
        mismatches += int(not same)
    record_criterion(6, mismatches == 0,
                     f"20 datasets (A-C), {mismatches} not bit-identical to the oracle estimator")
    assert mismatches == 0


def test_criterion_07_fcr_control(fcr_run):
    metrics, _ = fcr_run
    f2 = metrics.fcr["stage2"]["uposi-coord-conditional"]
    f1 = metrics.fcr["stage1"]["uposi-coord-conditional"]
    ok = f2 <= MC_BOUND and f1 <= MC_BOUND
    record_criterion(7, ok, f"C n=1000 200 reps: coord-conditional FCR stage2={f2:.4f} "
                            f"stage1={f1:.4f} (bound {MC_BOUND:.4f})")
    assert ok


def test_criterion_08_null_test_size(null_run):
    metrics, _ = null_run
    r2, r1 = metrics.rejection_rate["stage2"], metrics.rejection_rate["stage1"]
    ok = r2 <= MC_BOUND and r1 <= MC_BOUND
    record_criterion(8, ok, f"F n=1000 200 reps: rejection stage2={r2:.4f} stage1={r1:.4f} "
                            f"(bound {MC_BOUND:.4f})")
    assert ok


def test_criterion_09_naive_ordering(fcr_run):
    metrics, _ = fcr_run
    parts, ok = [], True
    for key in ("stage2", "stage1"):
        med, fcr = metrics.median_length[key], metrics.fcr[key]
        shorter = med["naive"] < med["uposi-coord-conditional"]
        worse = fcr["naive"] > fcr["uposi-coord-conditional"] and fcr["naive"] > fcr["uposi-coord"]
        ok &= shorter and worse
        parts.append(f"{key}: len naive={med['naive']:.3f} cond={med['uposi-coord-conditional']:.3f}"
                     f", FCR naive={fcr['naive']:.3f} cond={fcr['uposi-coord-conditional']:.3f} "
                     f"coord={fcr['uposi-coord']:.3f}")
    record_criterion(9, ok, "; ".join(parts))
    assert ok


def test_criterion_10_loop_reference_equivalence():
    ds = toy_dataset(n=50, q=3, seed=SEED)
    full = (0, 1, 2, 3)
    cfg = FitConfig(K=5, seed=SEED, selector2=SelectorSpec(kind="fixed", model=full),
                    selector1=SelectorSpec(kind="fixed", model=full))
    fit = fit_two_stage(ds, cfg)
    draws = run_bootstrap(fit, ds, B=100, seed=SEED)
    omegas = [draw_multipliers(50, "exponential", draw_stream(SEED, b)).tolist()
              for b in range(100)]
    out = ref.pipeline(ds.x1.tolist(), ds.a1.tolist(), ds.x2.tolist(), ds.a2.tolist(),
                       ds.y.tolist(), ds.phi1.tolist(), ds.phi2.tolist(),
                       make_folds(50, 5, SEED).folds, list(full), list(full), omegas, ALPHA)
    got = {"G2": fit.stage2.gram.g, "H2": fit.stage2.gram.h, "theta2": fit.stage2.theta,
           "pseudo": fit.pseudo_outcomes, "G1": fit.stage1.gram.g, "H1": fit.stage1.gram.h,
           "theta1": fit.stage1.theta, "dG2": draws.d_g_stage2, "dH2": draws.d_h_stage2,
           "dG1": draws.d_g_stage1, "dH1": draws.d_h_stage1}
    want = {k: out[k] for k in ("G2", "H2", "theta2", "pseudo", "G1", "H1", "theta1")}
    want.update(out["draws"])
    for s in (2, 1):
        sf = fit.stage(s)
        ivs = stage_intervals(sf, draws, ALPHA)
        o = out[f"stage{s}"]
        got[f"radius_combined{s}"] = combined_radius(draws, s, sf.l1_norm, ALPHA)
        got[f"radius_conditional{s}"] = conditional_radius(draws, s, ALPHA)
        want[f"radius_combined{s}"] = o["radius_combined"]
        want[f"radius_conditional{s}"] = o["radius_conditional"]
        for name, flavor in (("hyperrect", "uposi-hyperrect"), ("coord", "uposi-coord"),
                             ("conditional", "uposi-coord-conditional"), ("naive", "naive")):
            got[f"{name}{s}"] = ivs[flavor].half_lengths
            want[f"{name}{s}"] = o[name]
    dev = {k: float(np.max(np.abs(np.asarray(got[k]) - np.asarray(want[k])))) for k in want}
    worst_key = max(dev, key=dev.get)
    ok = dev[worst_key] <= 1e-10 and len(draws.rejected) == 0
    record_criterion(10, ok, f"n=50 p=4, {len(dev)} quantities, max deviation "
                             f"{dev[worst_key]:.2e} ({worst_key})")
    assert ok


def test_criterion_11_bootstrap_smoke():
    n = 100_000
    se = 1.0 / math.sqrt(n)
    parts, ok = [], True
    # fourth central moments; Var(s^2) = (mu4 - (n-3)/(n-1)) / n at unit variance
    mu4 = {"exponential": 9.0, "two-point": 1.0, "normal": 3.0}
    for kind in MULTIPLIER_KINDS:
        w = draw_multipliers(n, kind, draw_stream(SEED, 0))
        z_mean = abs(w.mean() - 1.0) / se
        var_se = math.sqrt((mu4[kind] - (n - 3) / (n - 1)) / n)
        z_var = abs(w.var(ddof=1) - 1.0) / var_se
        ok &= z_mean <= 4 and z_var <= 4
        parts.append(f"{kind}: z_mean={z_mean:.2f} z_var={z_var:.2f}")
    zeros = 0
    for ds in (toy_dataset(n=80, seed=SEED), generate_scenario(scenario("C"), SEED, n=300)):
        fit = fit_two_stage(ds, FitConfig(seed=SEED, selector2=SelectorSpec(size=3),
                                          selector1=SelectorSpec(size=3)))
        zeros += int(one_bootstrap_draw(fit, ds, np.ones(ds.n)) == (0.0, 0.0, 0.0, 0.0))
    ok &= zeros == 2
    record_criterion(11, ok, "; ".join(parts) + f"; all-ones collapse {zeros}/2")
    assert ok


def test_criterion_02_normal_equation_residuals():
    # Runs last in this module so the log covers every solve above.
    worst, solves = RESIDUAL_LOG["max_relative"], RESIDUAL_LOG["solves"]
    ok = solves > 0 and worst <= 1e-10
    record_criterion(2, ok, f"{solves} solves, max relative residual {worst:.2e}")
    assert ok
