"""Multiplier bootstrap of the stage summaries and the deviation statistics.

Each draw reweights every observation's contribution to ``G`` and ``H`` by
an i.i.d. multiplier with mean one and variance one, re-solves stage 2 at the
selected model, rebuilds the pseudo-outcomes from the perturbed stage-2
coefficients and reweights stage 1. Nuisance predictions stay fixed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, subset_matrix, subset_vector
from .engine import (TwoStageFit, grad_stage1, grad_stage2, gram_hessian, pseudo_outcome,
                     solve_batch)
from .exceptions import ConfigurationError, NumericalError

BOOT_STREAM = 0x424F4F54  # "BOOT"
MULTIPLIER_KINDS = ("exponential", "two-point", "normal")
MAX_REJECT_FRACTION = 0.01
_DRAW_BATCH = 50


@dataclass(frozen=True)
class MultiplierLaw:
    """Distribution of the bootstrap weights.

    ``"exponential"`` is Exp(1), ``"two-point"`` is uniform on ``{0, 2}`` and
    ``"normal"`` is N(1, 1). All three have mean one and variance one.
    """

    kind: str = "exponential"

    def __post_init__(self):
        if self.kind not in MULTIPLIER_KINDS:
            raise ConfigurationError(f"unknown multiplier law {self.kind!r}")

    def sample(self, rng: np.random.Generator, size):
        if self.kind == "exponential":
            return rng.standard_exponential(size)
        if self.kind == "two-point":
            return 2.0 * rng.integers(0, 2, size=size).astype(float)
        return rng.standard_normal(size) + 1.0


def _law(law) -> MultiplierLaw:
    if isinstance(law, MultiplierLaw):
        return law
    return MultiplierLaw(law)


def draw_stream(seed: int, index: int) -> np.random.Generator:
    """Generator for bootstrap draw ``index``; independent of any other draw."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & (2**64 - 1), BOOT_STREAM, int(index)]))


def draw_multipliers(n: int, law="exponential", stream: np.random.Generator | None = None):
    """``n`` i.i.d. multipliers from ``law`` using ``stream``."""
    if stream is None:
        raise ConfigurationError("draw_multipliers needs an explicit RNG stream")
    return _law(law).sample(stream, n)


@dataclass(frozen=True, eq=False)
class BootstrapDraws:
    """Accepted bootstrap draws.

    The four ``d_*`` arrays hold ``sqrt(n)``-scaled max-norm deviations;
    ``theta2`` and ``theta1`` hold the perturbed coefficients at the
    selected models. ``rejected`` lists the indices of discarded draws.
    """

    n: int
    d_g_stage2: np.ndarray
    d_h_stage2: np.ndarray
    d_g_stage1: np.ndarray
    d_h_stage1: np.ndarray
    theta2: np.ndarray
    theta1: np.ndarray
    draw_index: np.ndarray
    rejected: tuple = ()
    law: str = "exponential"
    seed: int = 0

    def __post_init__(self):
        for name in ("d_g_stage2", "d_h_stage2", "d_g_stage1", "d_h_stage1",
                     "theta2", "theta1", "draw_index"):
            v = np.array(getattr(self, name))
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        for name in ("d_g_stage2", "d_h_stage2", "d_g_stage1", "d_h_stage1"):
            v = getattr(self, name)
            if np.any(~np.isfinite(v)) or np.any(v < 0):
                raise NumericalError(f"{name} has negative or non-finite entries")

    @property
    def B(self) -> int:
        return self.d_g_stage2.shape[0]

    def d_g(self, stage: int):
        return self.d_g_stage1 if stage == 1 else self.d_g_stage2

    def d_h(self, stage: int):
        return self.d_h_stage1 if stage == 1 else self.d_h_stage2

    def theta(self, stage: int):
        return self.theta1 if stage == 1 else self.theta2

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["draw", "dG2", "dH2", "dG1", "dH1"])
            for k in range(self.B):
                w.writerow([int(self.draw_index[k]), repr(float(self.d_g_stage2[k])),
                            repr(float(self.d_h_stage2[k])), repr(float(self.d_g_stage1[k])),
                            repr(float(self.d_h_stage1[k]))])


def _max_abs_dev(batch, ref):
    diff = np.abs(batch - ref[None])
    return diff.reshape(diff.shape[0], -1).max(axis=1)


def bootstrap_core(fit: TwoStageFit, dataset: Dataset, omega):
    """Perturbed statistics for a ``(B, n)`` stack of multipliers.

    Returns a dict with unscaled deviations ``dG2, dH2, dG1, dH1``, the
    perturbed coefficients ``theta2, theta1`` and the boolean mask ``ok`` of
    draws whose stage Hessians were invertible at the selected models.
    """
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    n = dataset.n
    if omega.shape[1] != n:
        raise ConfigurationError(f"multipliers have length {omega.shape[1]}, expected {n}")
    nu = fit.nuisances
    s2, s1 = fit.stage2, fit.stage1
    m2, m1 = s2.model, s1.model

    G2 = grad_stage2(dataset.phi2, dataset.a2, nu["propensity2"], dataset.y,
                     nu["outcome2"], multipliers=omega)
    H2 = gram_hessian(dataset.phi2, dataset.a2, nu["propensity2"], multipliers=omega)
    theta2, ok2 = solve_batch(subset_matrix(H2, m2), subset_vector(G2, m2), stage=2,
                              models=m2.indices, raise_on_singular=False)

    B = omega.shape[0]
    theta2_safe = np.where(ok2[:, None], theta2, 0.0)
    pseudo = pseudo_outcome(dataset.y, dataset.a2, dataset.phi2, m2, theta2_safe)
    G1 = grad_stage1(dataset.phi1, dataset.a1, nu["propensity1"], pseudo, nu["outcome1"],
                     multipliers=omega, m2=m2)
    H1 = gram_hessian(dataset.phi1, dataset.a1, nu["propensity1"], multipliers=omega)
    theta1, ok1 = solve_batch(subset_matrix(H1, m1), subset_vector(G1, m1), stage=1,
                              models=m1.indices, raise_on_singular=False)
    ok = ok2 & ok1
    out = {
        "dG2": _max_abs_dev(G2, s2.gram.g),
        "dH2": _max_abs_dev(H2, s2.gram.h),
        "dG1": _max_abs_dev(G1, s1.gram.g),
        "dH1": _max_abs_dev(H1, s1.gram.h),
        "theta2": theta2,
        "theta1": theta1,
        "ok": ok,
    }
    assert out["dG2"].shape == (B,)
    return out


def one_bootstrap_draw(fit: TwoStageFit, dataset: Dataset, multipliers):
    """Unscaled ``(dG2, dH2, dG1, dH1)`` for a single multiplier vector.

    Returns ``None`` when a perturbed Hessian is singular at the selected model.
    """
    out = bootstrap_core(fit, dataset, np.asarray(multipliers, dtype=float)[None, :])
    if not out["ok"][0]:
        return None
    return tuple(float(out[k][0]) for k in ("dG2", "dH2", "dG1", "dH1"))


def run_bootstrap(fit: TwoStageFit, dataset: Dataset, B: int = 1000, law="exponential",
                  seed: int = 0, min_B: int = 100) -> BootstrapDraws:
    """``B`` perturbation draws, scaled by ``sqrt(n)``.

    Draw ``b`` uses its own RNG stream derived from ``(seed, b)``, so the
    result does not depend on how draws are batched.

    Raises
    ------
    NumericalError
        When more than 1% of draws have a singular perturbed Hessian.
    """
    if B < min_B:
        raise ConfigurationError(f"B must be >= {min_B}, got {B}")
    law = _law(law)
    n = dataset.n
    parts = []
    for start in range(0, B, _DRAW_BATCH):
        idx = range(start, min(B, start + _DRAW_BATCH))
        omega = np.stack([draw_multipliers(n, law, draw_stream(seed, b)) for b in idx])
        parts.append(bootstrap_core(fit, dataset, omega))
    cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    ok = cat["ok"]
    rejected = tuple(int(i) for i in np.flatnonzero(~ok))
    if len(rejected) > MAX_REJECT_FRACTION * B:
        raise NumericalError(
            f"{len(rejected)} of {B} bootstrap draws had singular Hessians (> 1%)")
    root_n = math.sqrt(n)
    return BootstrapDraws(
        n=n,
        d_g_stage2=root_n * cat["dG2"][ok],
        d_h_stage2=root_n * cat["dH2"][ok],
        d_g_stage1=root_n * cat["dG1"][ok],
        d_h_stage1=root_n * cat["dH1"][ok],
        theta2=cat["theta2"][ok],
        theta1=cat["theta1"][ok],
        draw_index=np.flatnonzero(ok),
        rejected=rejected,
        law=law.kind,
        seed=int(seed),
    )


def upper_order_statistic(values, alpha: float) -> float:
    """The ``ceil((1 - alpha) B)``-th smallest value; ``0`` when that rank is 0.

    A relative slack of ``1e-12`` on the rank guards against ``(1 - alpha) B``
    landing a rounding error above an integer.
    """
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1], got {alpha}")
    v = np.sort(np.asarray(values, dtype=float))
    B = v.shape[0]
    if B == 0:
        raise ConfigurationError("no draws to take a quantile of")
    k = math.ceil((1.0 - alpha) * B * (1.0 - 1e-12))
    return 0.0 if k == 0 else float(v[k - 1])


def combined_radius(draws: BootstrapDraws, stage: int, l1_norm: float, alpha: float) -> float:
    """Radius of the simultaneous region along the ray ``||theta||_1 = l1_norm``.

    Quantile of ``D^G + l1_norm * D^H`` over draws, divided by ``sqrt(n)``.
    """
    if l1_norm < 0:
        raise ConfigurationError("l1_norm must be >= 0")
    stat = draws.d_g(stage) + l1_norm * draws.d_h(stage)
    return upper_order_statistic(stat, alpha) / math.sqrt(draws.n)


def conditional_radius(draws: BootstrapDraws, stage: int, alpha: float) -> float:
    """Quantile of ``D^G`` alone, divided by ``sqrt(n)``."""
    return upper_order_statistic(draws.d_g(stage), alpha) / math.sqrt(draws.n)
