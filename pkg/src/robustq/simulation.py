"""Simulation scenarios A-F, oracle targets, and the replication harness.

Data follow ``Y = eta1(X1) + A1 delta1(X1) + eta2(X2) + A2 delta2(X2) + eps``
with ``X1, U ~ U(-1, 1)^p1``, ``X2 = X1 + gamma A1 + U``,
``A_k ~ Bernoulli(expit(psiA(X_k)))`` and ``eps ~ N(0, 1)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit

from .bootstrap import MultiplierLaw, combined_radius, run_bootstrap
from .data import Dataset, FeatureDictionary, ModelSet, build_basis, default_dictionaries
from .engine import (FitConfig, GramPair, TwoStageFit, fit_two_stage, grad_stage1,
                     grad_stage2, gram_hessian, pseudo_outcome, solve_normal,
                     weighted_row_means)
from .exceptions import (ConfigurationError, ReplicationError, RobustQError,
                         UnsupportedScenarioError)
from .inference import FLAVORS, stage_intervals, test_null_zero
from .nuisance import DEFAULT_EPS, LearnerSpec
from .selection import SelectorSpec

BETA = np.array([2.0, 2.0, 1.0, 0.1, 0.1])
DATA_STREAM = 0x44415441  # "DATA"
MC_STREAM = 0x4D43  # "MC"
REP_STREAM = 0x524550  # "REP"
POPULATION_FLAVORS = ("uposi-hyperrect", "uposi-coord")
INEQUALITY_SLACK = 1e-8


# --------------------------------------------------------------------------
# scenario functions
# --------------------------------------------------------------------------

def _first_five(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 5:
        raise ConfigurationError(f"scenario functions need >= 5 coordinates, got {x.shape[-1]}")
    return x[..., :5]


def f_l(x):
    """``x . beta`` on the first five coordinates."""
    return (_first_five(x) * BETA).sum(axis=-1)


def f_q(x):
    """``0.5 (x' diag(beta) x + x . beta - 2)``."""
    z = _first_five(x)
    return 0.5 * ((BETA * z * z).sum(axis=-1) + (BETA * z).sum(axis=-1) - 2.0)


def f_n(x):
    """``0.5 sin(pi x1 x2) + 2 (x3 - 0.5)^2 - 1``."""
    z = _first_five(x)
    return 0.5 * np.sin(np.pi * z[..., 0] * z[..., 1]) + 2.0 * (z[..., 2] - 0.5) ** 2 - 1.0


def _zero(x):
    return np.zeros(_first_five(x).shape[:-1])


def _one(x):
    return np.ones(_first_five(x).shape[:-1])


FUNCTIONS = {"f_l": f_l, "f_q": f_q, "f_n": f_n, "zero": _zero, "one": _one}


@dataclass(frozen=True)
class ScenarioSpec:
    """One row of the scenario table plus the covariate dimension and sample size."""

    label: str
    eta1: str
    delta1: str
    eta2: str
    delta2: str
    psiA: str
    gamma: int
    p1: int = 10
    n: int = 500

    def __post_init__(self):
        for name in ("eta1", "delta1", "eta2", "delta2", "psiA"):
            if getattr(self, name) not in FUNCTIONS:
                raise ConfigurationError(f"{name}: unknown function tag {getattr(self, name)!r}")
        if self.gamma not in (0, 1):
            raise ConfigurationError("gamma must be 0 or 1")
        if self.p1 < 5:
            raise ConfigurationError("p1 must be >= 5")
        if self.n < 2:
            raise ConfigurationError("n must be >= 2")

    def replace(self, **kw) -> "ScenarioSpec":
        d = asdict(self)
        d.update(kw)
        return ScenarioSpec(**d)


_TABLE = {
    "A": ("f_q", "f_l", "zero", "one", "f_l", 0),
    "B": ("f_q", "f_l", "zero", "one", "f_n", 0),
    "C": ("zero", "f_l", "zero", "one", "zero", 0),
    "D": ("f_l", "f_l", "f_q", "f_l", "f_l", 1),
    "E": ("f_l", "f_l", "f_q", "f_l", "f_n", 1),
    "F": ("zero", "zero", "zero", "zero", "one", 1),
}
SCENARIOS = {k: ScenarioSpec(k, *v) for k, v in _TABLE.items()}


def scenario(label: str, p1: int = 10, n: int = 500) -> ScenarioSpec:
    if label not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {label!r}; choose from {sorted(SCENARIOS)}")
    return SCENARIOS[label].replace(p1=p1, n=n)


class ScenarioFunction:
    """Picklable true function of a scenario, evaluated on nuisance features.

    ``which`` is one of ``"propensity1"`` and ``"outcome1"`` (features ``x1``)
    or ``"propensity2"`` and ``"outcome2"`` (features ``(x1, a1, x2)``).
    """

    def __init__(self, spec: ScenarioSpec, which: str):
        self.spec = spec
        self.which = which

    def __call__(self, X):
        return TrueFunctions(self.spec).nuisance(self.which, X)

    def __repr__(self):
        return f"ScenarioFunction({self.spec.label!r}, {self.which!r})"


class TrueFunctions:
    """Blips, propensities and conditional means of a scenario."""

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec

    def _f(self, name, x):
        return FUNCTIONS[getattr(self.spec, name)](x)

    def propensity(self, x):
        return expit(self._f("psiA", x))

    def delta2(self, x2):
        return self._f("delta2", x2)

    @property
    def stage1_identified(self) -> bool:
        """The stage-1 blip is known when the stage-2 blip is a constant in
        every candidate model and ``eta2`` vanishes; then it equals ``delta1``."""
        return self.spec.eta2 == "zero" and self.spec.delta2 in ("zero", "one")

    def _require_stage1(self):
        if not self.stage1_identified:
            raise UnsupportedScenarioError(
                f"scenario {self.spec.label}: the stage-1 blip has no closed form")

    def delta1(self, x1):
        self._require_stage1()
        return self._f("delta1", x1)

    def split_history(self, h):
        h = np.asarray(h, dtype=float)
        p1 = self.spec.p1
        if h.shape[-1] != 2 * p1 + 1:
            raise ConfigurationError(f"history must have {2 * p1 + 1} columns")
        return h[:, :p1], h[:, p1], h[:, p1 + 1:]

    def outcome2(self, h):
        """``E[Y | x1, a1, x2]``."""
        x1, a1, x2 = self.split_history(h)
        return (self._f("eta1", x1) + a1 * self._f("delta1", x1) + self._f("eta2", x2)
                + self.propensity(x2) * self._f("delta2", x2))

    def outcome1(self, x1):
        """Mean of the stage-1 pseudo-outcome given ``x1`` at the true stage-2 blip."""
        self._require_stage1()
        c = 1.0 if self.spec.delta2 == "one" else 0.0
        return self._f("eta1", x1) + self.propensity(x1) * self._f("delta1", x1) + c

    def nuisance(self, which, X):
        X = np.asarray(X, dtype=float)
        if which == "propensity1":
            return self.propensity(X)
        if which == "outcome1":
            return self.outcome1(X)
        if which == "propensity2":
            return self.propensity(self.split_history(X)[2])
        if which == "outcome2":
            return self.outcome2(X)
        raise ConfigurationError(f"unknown nuisance {which!r}")

    def oracle_learners(self) -> dict:
        return {w: LearnerSpec("oracle", func=ScenarioFunction(self.spec, w))
                for w in ("propensity2", "outcome2", "propensity1", "outcome1")}


# --------------------------------------------------------------------------
# data generation
# --------------------------------------------------------------------------

def _simulate(spec: ScenarioSpec, n: int, rng: np.random.Generator):
    p1 = spec.p1
    x1 = rng.uniform(-1.0, 1.0, size=(n, p1))
    u = rng.uniform(-1.0, 1.0, size=(n, p1))
    v1 = rng.uniform(size=n)
    v2 = rng.uniform(size=n)
    eps = rng.standard_normal(n)
    tf = TrueFunctions(spec)
    a1 = (v1 < tf.propensity(x1)).astype(float)
    x2 = x1 + spec.gamma * a1[:, None] + u
    a2 = (v2 < tf.propensity(x2)).astype(float)
    f = FUNCTIONS
    y = (f[spec.eta1](x1) + a1 * f[spec.delta1](x1) + f[spec.eta2](x2)
         + a2 * f[spec.delta2](x2) + eps)
    return x1, a1, x2, a2, y


def generate_scenario(spec: ScenarioSpec, seed: int, n: int | None = None,
                      stage2_input="x2", interactions=False) -> Dataset:
    """Simulate ``n`` trajectories (default ``spec.n``); deterministic per seed."""
    n = spec.n if n is None else n
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), DATA_STREAM]))
    x1, a1, x2, a2, y = _simulate(spec, n, rng)
    return Dataset.from_arrays(x1, a1, x2, a2, y, stage2_input=stage2_input,
                               interactions=interactions)


# --------------------------------------------------------------------------
# oracle targets
# --------------------------------------------------------------------------

_POPULATION_CACHE: dict = {}


def clear_population_cache():
    _POPULATION_CACHE.clear()


def _stage_design(spec, stage, x1, a1, x2, dictionary, stage2_input):
    tf = TrueFunctions(spec)
    if stage == 1:
        return build_basis(x1, dictionary), tf.propensity(x1), tf.delta1(x1)
    raw = x2 if stage2_input == "x2" else np.column_stack([x1, a1, x2])
    return build_basis(raw, dictionary), tf.propensity(x2), tf.delta2(x2)


def _mc_chunks(spec, mc_n, seed, chunk):
    for c, start in enumerate(range(0, mc_n, chunk)):
        m = min(chunk, mc_n - start)
        rng = np.random.default_rng(
            np.random.SeedSequence([int(seed) & (2**64 - 1), MC_STREAM, c]))
        x1, a1, x2, _, _ = _simulate(spec, m, rng)
        yield x1, a1, x2


def _stage_dictionary(spec, stage, dictionary, stage2_input):
    if dictionary is not None:
        return dictionary
    return default_dictionaries(spec.p1, spec.p1, stage2_input)[stage - 1]


def population_grams(spec: ScenarioSpec, stage: int, mc_n: int = 10**6, seed: int = 0,
                     dictionary: FeatureDictionary | None = None, stage2_input="x2",
                     chunk: int = 100_000) -> GramPair:
    """Monte-Carlo ``G0 = E[w Delta W]`` and ``H0 = E[w W W^T]`` with ``w = mu (1 - mu)``.

    The treatment is integrated out analytically, which leaves the
    propensity variance as the weight. Results are cached per scenario,
    stage, ``mc_n``, seed and dictionary.
    """
    if stage == 1:
        TrueFunctions(spec)._require_stage1()
    dictionary = _stage_dictionary(spec, stage, dictionary, stage2_input)
    key = (spec.label, spec.eta1, spec.delta1, spec.eta2, spec.delta2, spec.psiA, spec.gamma,
           spec.p1, stage, int(mc_n), int(seed), stage2_input,
           json.dumps(dictionary.to_dict(), sort_keys=True))
    if key in _POPULATION_CACHE:
        return _POPULATION_CACHE[key]
    p = dictionary.p
    acc = np.zeros((p + 1, p + 1))
    for x1, a1, x2 in _mc_chunks(spec, mc_n, seed, chunk):
        W, mu, delta = _stage_design(spec, stage, x1, a1, x2, dictionary, stage2_input)
        Z = np.column_stack([W, delta])
        acc += (Z * (mu * (1.0 - mu))[:, None]).T @ Z
    acc /= mc_n
    h = 0.5 * (acc[:p, :p] + acc[:p, :p].T)
    out = GramPair(acc[:p, p], h, stage, "population-mc")
    _POPULATION_CACHE[key] = out
    return out


@dataclass(frozen=True, eq=False)
class PopulationTarget:
    theta: np.ndarray
    se: np.ndarray | None
    model: ModelSet
    stage: int
    mc_n: int


def true_population_target(spec: ScenarioSpec, m: ModelSet, stage: int, mc_n: int = 10**6,
                           seed: int = 0, dictionary=None, stage2_input="x2",
                           with_se: bool = True, min_mc: int = 10**5) -> PopulationTarget:
    """Best linear blip projection at model ``m`` with Monte-Carlo standard errors.

    Standard errors come from a second pass over the same draws, using the
    per-draw influence values ``H0(m)^-1 w W (Delta - W theta)``.
    """
    if mc_n < min_mc:
        raise ConfigurationError(f"mc_n must be >= {min_mc}")
    if stage == 1 and not TrueFunctions(spec).stage1_identified:
        raise UnsupportedScenarioError(
            f"scenario {spec.label}: stage-1 population target is not available")
    gram = population_grams(spec, stage, mc_n, seed, dictionary, stage2_input)
    theta = solve_normal(gram, m)
    se = None
    if with_se:
        dictionary = _stage_dictionary(spec, stage, dictionary, stage2_input)
        inv = np.linalg.inv(gram.h[np.ix_(m.indices, m.indices)])
        s1 = np.zeros(len(m))
        s2 = np.zeros(len(m))
        for x1, a1, x2 in _mc_chunks(spec, mc_n, seed, 100_000):
            W, mu, delta = _stage_design(spec, stage, x1, a1, x2, dictionary, stage2_input)
            Wm = W[:, list(m.indices)]
            infl = (Wm * (mu * (1 - mu) * (delta - Wm @ theta))[:, None]) @ inv.T
            s1 += infl.sum(axis=0)
            s2 += (infl * infl).sum(axis=0)
        var = np.maximum(s2 / mc_n - (s1 / mc_n) ** 2, 0.0)
        se = np.sqrt(var / mc_n)
    return PopulationTarget(theta, se, m, stage, int(mc_n))


def conditional_grams(dataset: Dataset, spec: ScenarioSpec, stage: int) -> GramPair:
    """Design-conditional summaries at the realized treatments.

    ``g = (1/n) sum (A - mu0)^2 Delta W`` and ``h = (1/n) sum (A - mu0)^2 W W^T``
    with the true propensity ``mu0``.
    """
    tf = TrueFunctions(spec)
    if stage == 1:
        W, a, mu, delta = dataset.phi1, dataset.a1, tf.propensity(dataset.x1), tf.delta1(dataset.x1)
    else:
        W, a, mu, delta = dataset.phi2, dataset.a2, tf.propensity(dataset.x2), tf.delta2(dataset.x2)
    r2 = (a - mu) ** 2
    g = weighted_row_means((r2 * delta)[None, :], W)[0]
    return GramPair(g, gram_hessian(W, a, mu), stage, "conditional")


def conditional_target(dataset: Dataset, spec: ScenarioSpec, m: ModelSet, stage: int):
    """Coefficients of the design-conditional blip projection at ``m``."""
    return solve_normal(conditional_grams(dataset, spec, stage), m)


def observed_D_statistics(fit: TwoStageFit, oracle_grams: dict) -> dict:
    """``{stage: (||G_hat - G0||_inf, ||H_hat - H0||_inf)}`` for the stages supplied."""
    out = {}
    for stage, g0 in oracle_grams.items():
        gram = fit.stage(stage).gram
        out[stage] = (float(np.max(np.abs(gram.g - g0.g))),
                      float(np.max(np.abs(gram.h - g0.h))))
    return out


def oracle_estimator(dataset: Dataset, spec: ScenarioSpec, m2: ModelSet, m1: ModelSet):
    """Both stage coefficients computed with the true nuisance functions.

    Returns ``(theta2, theta1, pseudo_outcomes)``.
    """
    f = {w: ScenarioFunction(spec, w) for w in ("propensity2", "outcome2",
                                                 "propensity1", "outcome1")}
    H2 = dataset.history2
    mu2a = np.asarray(f["propensity2"](H2), dtype=float).ravel()
    mu2y = np.asarray(f["outcome2"](H2), dtype=float).ravel()
    g2 = GramPair(grad_stage2(dataset.phi2, dataset.a2, mu2a, dataset.y, mu2y),
                  gram_hessian(dataset.phi2, dataset.a2, mu2a), 2, "oracle")
    theta2 = solve_normal(g2, m2)
    pseudo = pseudo_outcome(dataset.y, dataset.a2, dataset.phi2, m2, theta2)
    mu1a = np.asarray(f["propensity1"](dataset.x1), dtype=float).ravel()
    mu1y = np.asarray(f["outcome1"](dataset.x1), dtype=float).ravel()
    g1 = GramPair(grad_stage1(dataset.phi1, dataset.a1, mu1a, pseudo, mu1y),
                  gram_hessian(dataset.phi1, dataset.a1, mu1a), 1, "oracle")
    return theta2, solve_normal(g1, m1), pseudo


# --------------------------------------------------------------------------
# replications
# --------------------------------------------------------------------------

@dataclass
class SimConfig:
    """Settings shared by every replication of a study."""

    n: int = 500
    B: int = 1000
    alpha: float = 0.05
    K: int = 5
    learners: dict = field(default_factory=lambda: {
        "propensity2": "linear", "outcome2": "linear",
        "propensity1": "linear", "outcome1": "linear"})
    selector2: SelectorSpec = field(default_factory=lambda: SelectorSpec(size=5, cap=6))
    selector1: SelectorSpec = field(default_factory=lambda: SelectorSpec(size=5, cap=6))
    law: str = "exponential"
    mc_n: int = 10**6
    mc_seed: int = 0
    eps: float = DEFAULT_EPS
    stage2_input: str = "x2"
    family_check: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}")
        MultiplierLaw(self.law)
        if self.K < 2:
            raise ConfigurationError("K must be >= 2")

    def fit_config(self, spec: ScenarioSpec, seed: int) -> FitConfig:
        learners = {}
        for name, v in self.learners.items():
            learners[name] = (TrueFunctions(spec).oracle_learners()[name]
                              if v == "oracle" else v)
        return FitConfig(K=self.K, seed=seed, selector2=self.selector2,
                         selector1=self.selector1, eps=self.eps, **learners)


def rep_seed(seed: int, rep: int) -> int:
    """64-bit seed of replication ``rep``; pass it to replay one replication."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), REP_STREAM, int(rep)])
    return int(ss.generate_state(1, np.uint64)[0])


def _family(fit_stage):
    """Nested models visited by the selector, ending at the selected model."""
    sel = fit_stage.selection
    order = sel.get("entry_order")
    if order is None:
        return [fit_stage.model]
    forced = list(sel.get("forced", []))
    fam = []
    for k in range(len(order) + 1):
        idx = forced + list(order[:k])
        if idx:
            fam.append(ModelSet.of(idx, fit_stage.stage))
    if fit_stage.model not in fam:
        fam.append(fit_stage.model)
    return fam


def _family_coverage(gram, pop, models, radius_of):
    """Coverage of each model's population target by its own coordinate intervals."""
    out = {}
    for m in models:
        h = gram.h[np.ix_(m.indices, m.indices)]
        theta = solve_normal(gram, m)
        target = solve_normal(pop, m)
        half = np.abs(np.diag(np.linalg.inv(h))) * radius_of(float(np.abs(theta).sum()))
        out[m] = bool(np.all(np.abs(theta - target) <= half))
    return out


def _dominance_ok(sf, ivs) -> bool:
    """Coordinate half-lengths never exceed the hyperrectangle ones, and fall
    strictly below wherever the inverse-Hessian row has off-diagonal mass."""
    crd = ivs["uposi-coord"].half_lengths
    hyp = ivs["uposi-hyperrect"].half_lengths
    inv = np.linalg.inv(sf.h_sub)
    off = np.abs(inv).sum(axis=1) - np.abs(np.diag(inv))
    strict = (off > 1e-12) & (ivs["uposi-coord"].radius > 0)
    return bool(np.all(crd <= hyp) and np.all(crd[strict] < hyp[strict]))


def run_one_replication(spec: ScenarioSpec, cfg: SimConfig, seed: int, rep: int,
                        population: dict) -> dict:
    """Generate, fit, bootstrap and score a single replication."""
    rs = rep_seed(seed, rep)
    ds = generate_scenario(spec, rs, n=cfg.n, stage2_input=cfg.stage2_input)
    fit = fit_two_stage(ds, cfg.fit_config(spec, rs))
    draws = run_bootstrap(fit, ds, cfg.B, cfg.law, seed=rs)
    tf = TrueFunctions(spec)
    rows, stages = [], {}
    for s in (2, 1):
        sf = fit.stage(s)
        known = s == 2 or tf.stage1_identified
        scored = s == 2 or spec.label in ("A", "B", "C")
        ivs = stage_intervals(sf, draws, cfg.alpha)
        r_comb = ivs["uposi-coord"].radius
        r_cond = ivs["uposi-coord-conditional"].radius
        r_zero = combined_radius(draws, s, 0.0, cfg.alpha)
        info = {
            "model": sf.model.one_based(),
            "theta": sf.theta.tolist(),
            "radius_combined": r_comb,
            "radius_conditional": r_cond,
            "radius_zero": r_zero,
            "null_reject": test_null_zero(sf, r_zero) == "reject",
            "dominance_ok": _dominance_ok(sf, ivs),
            "cond_le_comb": bool(r_cond <= r_comb and np.all(
                ivs["uposi-coord-conditional"].half_lengths
                <= ivs["uposi-coord"].half_lengths)),
            "scored": scored and known,
            "n_bootstrap_rejected": len(draws.rejected),
        }
        targets = {}
        if known:
            pop = population[s]
            theta_star = solve_normal(pop, sf.model)
            theta_cond = conditional_target(ds, spec, sf.model, s)
            dG, dH = observed_D_statistics(fit, {s: pop})[s]
            l1 = float(np.abs(theta_star).sum())
            lhs = float(np.max(np.abs(sf.h_sub @ (sf.theta - theta_star))))
            bound = dG + dH * l1
            info.update(ineq_lhs=lhs, ineq_bound=bound, D_G=dG, D_H=dH,
                        ineq_ok=bool(lhs <= bound + INEQUALITY_SLACK * (1.0 + l1)),
                        theta_population=theta_star.tolist(),
                        theta_conditional=theta_cond.tolist())
            targets = {f: (theta_star if f in POPULATION_FLAVORS else theta_cond)
                       for f in FLAVORS}
            if cfg.family_check:
                fam = _family(sf)
                cov = _family_coverage(
                    sf.gram, pop, fam,
                    lambda l1n, s=s: combined_radius(draws, s, l1n, cfg.alpha))
                direct = bool(np.all(ivs["uposi-coord"].covers(theta_star)))
                info["family_match"] = cov[sf.model] == direct
                info["family_all_covered"] = all(cov.values())
        info["noncovered"] = {}
        for flavor, iv in ivs.items():
            cov = iv.covers(targets[flavor]) if targets else np.full(len(sf.model), np.nan)
            if targets:
                info["noncovered"][flavor] = int(np.sum(~cov))
            for j, idx in enumerate(sf.model.indices):
                rows.append({
                    "rep": rep, "stage": s, "flavor": flavor, "coordinate": idx + 1,
                    "center": float(iv.centers[j]), "half_length": float(iv.half_lengths[j]),
                    "target": float(targets[flavor][j]) if targets else float("nan"),
                    "covered": (bool(cov[j]) if targets else None),
                    "selected_model": ";".join(str(i) for i in sf.model.one_based()),
                })
        stages[s] = info
    return {"rep": rep, "seed": rs, "rows": rows, "stages": stages}


def max_workers(n_jobs=None) -> int:
    """Worker count, capped by the ``ROBUSTQ_MAX_WORKERS`` environment variable."""
    n = n_jobs if n_jobs is not None else (os.cpu_count() or 1)
    cap = os.environ.get("ROBUSTQ_MAX_WORKERS")
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise ConfigurationError("ROBUSTQ_MAX_WORKERS must be an integer") from None
    return max(1, int(n))


def _safe_rep(spec, cfg, seed, rep, population):
    try:
        return run_one_replication(spec, cfg, seed, rep, population)
    except RobustQError as exc:
        raise ReplicationError(
            f"replication {rep} (seed {rep_seed(seed, rep)}) failed: "
            f"{type(exc).__name__}: {exc}", rep, rep_seed(seed, rep)) from exc


@dataclass
class Metrics:
    """Summary of a replication study."""

    scenario: str
    n: int
    reps: int
    alpha: float
    fcr: dict
    fcr_pooled: dict
    fcr_se: dict
    median_length: dict
    rejection_rate: dict
    checks: dict

    def to_dict(self):
        return asdict(self)


def summarize(spec: ScenarioSpec, cfg: SimConfig, results: list) -> Metrics:
    """FCR, median full lengths, null rejection rates and exact-check counts."""
    fcr, fcr_se, med, rej = {}, {}, {}, {}
    pooled = {}
    for s in (2, 1):
        key = f"stage{s}"
        scored = [r["stages"][s] for r in results if r["stages"][s]["scored"]]
        rej[key] = float(np.mean([r["stages"][s]["null_reject"] for r in results]))
        fcr[key], fcr_se[key], med[key] = {}, {}, {}
        for flavor in FLAVORS:
            lens = [2 * row["half_length"] for r in results for row in r["rows"]
                    if row["stage"] == s and row["flavor"] == flavor]
            med[key][flavor] = float(np.median(lens))
            if scored:
                props = np.array([st["noncovered"][flavor] / len(st["model"]) for st in scored])
                fcr[key][flavor] = float(props.mean())
                fcr_se[key][flavor] = float(props.std(ddof=1) / math.sqrt(len(props))
                                            if len(props) > 1 else 0.0)
    for flavor in FLAVORS:
        num, den = [], []
        for r in results:
            sts = [r["stages"][s] for s in (2, 1) if r["stages"][s]["scored"]]
            if sts:
                num.append(sum(st["noncovered"][flavor] for st in sts))
                den.append(sum(len(st["model"]) for st in sts))
        if den:
            pooled[flavor] = float(np.mean(np.array(num) / np.array(den)))
    checks = {
        "inequality_violations": 0, "dominance_violations": 0,
        "conditional_above_combined": 0, "family_mismatches": 0,
        "bootstrap_rejected_draws": 0,
    }
    for r in results:
        for s in (2, 1):
            st = r["stages"][s]
            checks["inequality_violations"] += int(not st.get("ineq_ok", True))
            checks["dominance_violations"] += int(not st["dominance_ok"])
            checks["conditional_above_combined"] += int(not st["cond_le_comb"])
            checks["family_mismatches"] += int(not st.get("family_match", True))
        checks["bootstrap_rejected_draws"] += r["stages"][2]["n_bootstrap_rejected"]
    return Metrics(spec.label, cfg.n, len(results), cfg.alpha, fcr, pooled, fcr_se, med,
                   rej, checks)


def population_for(spec: ScenarioSpec, cfg: SimConfig) -> dict:
    out = {2: population_grams(spec, 2, cfg.mc_n, cfg.mc_seed, stage2_input=cfg.stage2_input)}
    if TrueFunctions(spec).stage1_identified:
        out[1] = population_grams(spec, 1, cfg.mc_n, cfg.mc_seed)
    return out


def run_replications(spec: ScenarioSpec, reps: int, cfg: SimConfig | None = None,
                     seed: int = 0, n_jobs: int | None = 1):
    """Run ``reps`` independent replications.

    Returns ``(Metrics, results)`` where ``results[i]`` is the record of
    replication ``i``. Output does not depend on ``n_jobs``.

    Raises
    ------
    ReplicationError
        Naming the failing replication and its seed.
    """
    if reps < 1:
        raise ConfigurationError("reps must be >= 1")
    cfg = cfg or SimConfig(n=spec.n)
    population = population_for(spec, cfg)
    workers = max_workers(n_jobs)
    if workers == 1:
        results = [_safe_rep(spec, cfg, seed, r, population) for r in range(reps)]
    else:
        results = Parallel(n_jobs=workers)(
            delayed(_safe_rep)(spec, cfg, seed, r, population) for r in range(reps))
    results = sorted(results, key=lambda r: r["rep"])
    return summarize(spec, cfg, results), results
