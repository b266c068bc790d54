import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference as ref
from helpers import toy_dataset
from robustq.bootstrap import (BootstrapDraws, MultiplierLaw, bootstrap_core, combined_radius,
                               conditional_radius, draw_multipliers, draw_stream,
                               one_bootstrap_draw, run_bootstrap, upper_order_statistic)
from robustq.data import Dataset, make_folds
from robustq.engine import FitConfig, fit_two_stage
from robustq.exceptions import ConfigurationError, NumericalError
from robustq.selection import SelectorSpec


def _fixed_cfg(p2, p1, seed=0):
    return FitConfig(K=5, seed=seed,
                     selector2=SelectorSpec(kind="fixed", model=tuple(range(p2))),
                     selector1=SelectorSpec(kind="fixed", model=tuple(range(p1))))


@pytest.fixture(scope="module")
def fitted():
    ds = toy_dataset(n=120, seed=3)
    return ds, fit_two_stage(ds, FitConfig(seed=1, selector2=SelectorSpec(size=2),
                                           selector1=SelectorSpec(size=2)))


def _draws(dg, dh=None, n=100):
    dg = np.asarray(dg, dtype=float)
    dh = np.zeros_like(dg) if dh is None else np.asarray(dh, dtype=float)
    B = dg.shape[0]
    return BootstrapDraws(n, dg, dh, dg, dh, np.zeros((B, 1)), np.zeros((B, 1)), np.arange(B))


def test_two_point_support():
    w = draw_multipliers(1000, "two-point", draw_stream(0, 0))
    assert set(np.unique(w)) == {0.0, 2.0}


@pytest.mark.parametrize("kind", ["exponential", "two-point", "normal"])
def test_multiplier_moments(kind):
    w = draw_multipliers(100_000, kind, draw_stream(5, 1))
    se = 1.0 / math.sqrt(100_000)
    assert abs(w.mean() - 1.0) < 4 * se
    # var of (w - 1)^2 is mu4 - 1, at most 8 for these laws
    assert abs(w.var() - 1.0) < 4 * math.sqrt(8.0) * se


def test_exponential_positive():
    assert draw_multipliers(10_000, "exponential", draw_stream(1, 2)).min() > 0


def test_law_validation():
    with pytest.raises(ConfigurationError):
        MultiplierLaw("poisson")
    with pytest.raises(ConfigurationError):
        draw_multipliers(3, "normal", None)


def test_streams_independent_of_order():
    a = draw_multipliers(5, "normal", draw_stream(9, 4))
    draw_multipliers(5, "normal", draw_stream(9, 3))
    b = draw_multipliers(5, "normal", draw_stream(9, 4))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, draw_multipliers(5, "normal", draw_stream(9, 5)))


def test_all_ones_draw_gives_zero(fitted):
    ds, fit = fitted
    assert one_bootstrap_draw(fit, ds, np.ones(ds.n)) == (0.0, 0.0, 0.0, 0.0)


def test_single_and_batched_paths_agree(fitted):
    ds, fit = fitted
    omega = np.stack([draw_multipliers(ds.n, "exponential", draw_stream(2, b)) for b in range(4)])
    batch = bootstrap_core(fit, ds, omega)
    for b in range(4):
        single = one_bootstrap_draw(fit, ds, omega[b])
        assert single == tuple(float(batch[k][b]) for k in ("dG2", "dH2", "dG1", "dH1"))


def test_small_case_matches_reference():
    ds = toy_dataset(n=30, q=2, seed=8)
    fit = fit_two_stage(ds, _fixed_cfg(3, 3, seed=2))
    folds = make_folds(30, 5, 2)
    omegas = [draw_multipliers(30, "exponential", draw_stream(7, b)) for b in range(5)]
    out = ref.pipeline(ds.x1.tolist(), ds.a1.tolist(), ds.x2.tolist(), ds.a2.tolist(),
                       ds.y.tolist(), ds.phi1.tolist(), ds.phi2.tolist(), folds.folds,
                       [0, 1, 2], [0, 1, 2], [w.tolist() for w in omegas], 0.5)
    core = bootstrap_core(fit, ds, np.stack(omegas))
    for key in ("dG2", "dH2", "dG1", "dH1"):
        np.testing.assert_allclose(math.sqrt(30) * core[key], out["draws"][key],
                                   atol=1e-10, rtol=0)


def test_outcome_scaling():
    ds = toy_dataset(n=80, seed=4)
    c = -3.0
    scaled = Dataset.from_arrays(ds.x1, ds.a1, ds.x2, ds.a2, c * ds.y)
    cfg = _fixed_cfg(4, 4)
    d0 = run_bootstrap(fit_two_stage(ds, cfg), ds, B=100, seed=1)
    d1 = run_bootstrap(fit_two_stage(scaled, cfg), scaled, B=100, seed=1)
    np.testing.assert_allclose(d1.d_g_stage2, abs(c) * d0.d_g_stage2, rtol=1e-9)
    np.testing.assert_allclose(d1.d_h_stage2, d0.d_h_stage2, rtol=1e-12)


def test_run_bootstrap_deterministic(fitted):
    ds, fit = fitted
    a = run_bootstrap(fit, ds, B=120, seed=11)
    b = run_bootstrap(fit, ds, B=120, seed=11)
    np.testing.assert_array_equal(a.d_g_stage1, b.d_g_stage1)
    np.testing.assert_array_equal(a.theta2, b.theta2)
    c = run_bootstrap(fit, ds, B=120, seed=12)
    assert not np.array_equal(a.d_g_stage2, c.d_g_stage2)
    assert a.B == 120 and a.rejected == ()


def test_run_bootstrap_min_B(fitted):
    ds, fit = fitted
    with pytest.raises(ConfigurationError):
        run_bootstrap(fit, ds, B=99)


def test_quantile_of_constant_draws():
    d = _draws(np.full(200, 2.5), np.full(200, 0.5), n=25)
    assert conditional_radius(d, 2, 0.05) == pytest.approx(2.5 / 5)
    assert combined_radius(d, 2, 3.0, 0.05) == pytest.approx((2.5 + 1.5) / 5)


def test_combined_at_zero_norm_is_conditional():
    rng = np.random.default_rng(0)
    d = _draws(rng.exponential(size=300), rng.exponential(size=300))
    assert combined_radius(d, 1, 0.0, 0.1) == conditional_radius(d, 1, 0.1)


def test_order_statistic_against_sort():
    rng = np.random.default_rng(1)
    v = rng.normal(size=1000)
    assert upper_order_statistic(v, 0.05) == sorted(v)[949]
    assert upper_order_statistic(v, 0.05) == ref.order_stat(v.tolist(), 0.05)
    assert upper_order_statistic(np.arange(1.0, 1001.0), 0.5) == 500.0
    assert upper_order_statistic(v, 1.0) == 0.0


def test_order_statistic_errors():
    with pytest.raises(ConfigurationError):
        upper_order_statistic([1.0], 0.0)
    with pytest.raises(ConfigurationError):
        upper_order_statistic([], 0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
def test_quantile_monotone_in_alpha(seed, a, b):
    v = np.random.default_rng(seed).exponential(size=150)
    lo, hi = sorted((a, b))
    assert upper_order_statistic(v, hi) <= upper_order_statistic(v, lo)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 20.0), st.floats(0.01, 0.5))
def test_conditional_never_exceeds_combined(seed, l1, alpha):
    rng = np.random.default_rng(seed)
    d = _draws(rng.exponential(size=120), rng.exponential(size=120))
    assert conditional_radius(d, 2, alpha) <= combined_radius(d, 2, l1, alpha)


def test_quantile_stable_in_B(fitted):
    ds, fit = fitted
    big = run_bootstrap(fit, ds, B=10_000, seed=100)
    small = run_bootstrap(fit, ds, B=100, seed=200)
    alpha, l1 = 0.1, fit.stage2.l1_norm
    stat = small.d_g_stage2 + l1 * small.d_h_stage2
    q_small = upper_order_statistic(stat, alpha)
    q_big = combined_radius(big, 2, l1, alpha) * math.sqrt(ds.n)
    rng = np.random.default_rng(0)
    reps = [upper_order_statistic(rng.choice(stat, stat.size), alpha) for _ in range(500)]
    assert abs(q_small - q_big) <= 3 * np.std(reps, ddof=1)


def test_csv_dump(tmp_path, fitted):
    ds, fit = fitted
    d = run_bootstrap(fit, ds, B=100, seed=3)
    path = tmp_path / "draws.csv"
    d.to_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["draw", "dG2", "dH2", "dG1", "dH1"]
    assert len(rows) == 101
    assert float(rows[5][3]) == d.d_g_stage1[4]


def test_draws_reject_negative():
    with pytest.raises(NumericalError):
        _draws(np.array([-1.0, 1.0]))
