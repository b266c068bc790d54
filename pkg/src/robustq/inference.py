"""Simultaneous regions, interval half-lengths, naive intervals and point-null tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bootstrap import BootstrapDraws, combined_radius, conditional_radius, upper_order_statistic
from .data import ModelSet
from .engine import EIG_THRESHOLD, StageFit
from .exceptions import ConfigurationError, SingularityError

FLAVORS = ("uposi-hyperrect", "uposi-coord", "uposi-coord-conditional",
           "uposi-hyperrect-conditional", "naive")
STATISTICS = ("h-weighted", "diagonal-weighted")


@dataclass(frozen=True, eq=False)
class IntervalSet:
    """Symmetric intervals ``centers +/- half_lengths``, one per model coordinate."""

    model: ModelSet
    centers: np.ndarray
    half_lengths: np.ndarray
    flavor: str
    radius: float | None = None

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ConfigurationError(f"unknown interval flavor {self.flavor!r}")
        c = np.array(self.centers, dtype=float)
        h = np.array(self.half_lengths, dtype=float)
        if c.shape != (len(self.model),) or h.shape != c.shape:
            raise ConfigurationError("need one center and half-length per model coordinate")
        if not np.all(np.isfinite(h)) or np.any(h < 0):
            raise ConfigurationError("half-lengths must be finite and >= 0")
        c.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "half_lengths", h)

    @property
    def lower(self):
        return self.centers - self.half_lengths

    @property
    def upper(self):
        return self.centers + self.half_lengths

    def covers(self, target) -> np.ndarray:
        """Per-coordinate coverage flags for ``target``."""
        t = np.asarray(target, dtype=float)
        return np.abs(t - self.centers) <= self.half_lengths


@dataclass(frozen=True, eq=False)
class RegionSpec:
    """``{theta : stat(theta_hat - theta) <= radius}`` for one stage and model."""

    model: ModelSet
    theta_hat: np.ndarray
    h_hat_sub: np.ndarray
    radius: float
    statistic: str = "h-weighted"

    def __post_init__(self):
        if self.statistic not in STATISTICS:
            raise ConfigurationError(f"unknown region statistic {self.statistic!r}")
        if not self.radius >= 0:
            raise ConfigurationError("radius must be >= 0")
        k = len(self.model)
        if np.shape(self.theta_hat) != (k,) or np.shape(self.h_hat_sub) != (k, k):
            raise ConfigurationError("theta_hat and h_hat_sub must match the model size")

    @classmethod
    def from_fit(cls, fit: StageFit, radius, statistic="h-weighted"):
        return cls(fit.model, fit.theta, fit.h_sub, radius, statistic)

    def statistic_value(self, theta) -> float:
        delta = np.asarray(self.theta_hat, dtype=float) - np.asarray(theta, dtype=float)
        if delta.shape != (len(self.model),):
            raise ConfigurationError("theta has the wrong length")
        if self.statistic == "h-weighted":
            return float(np.max(np.abs(self.h_hat_sub @ delta)))
        return float(np.max(np.abs(delta / np.diag(checked_inverse(self.h_hat_sub)))))


def region_contains(spec: RegionSpec, theta, atol: float = 0.0) -> bool:
    """Membership of ``theta`` in the region (``atol`` is added to the radius)."""
    return spec.statistic_value(theta) <= spec.radius + atol


def checked_inverse(h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    eig = float(np.linalg.eigvalsh(h)[0])
    if eig <= EIG_THRESHOLD:
        raise SingularityError(f"submodel Hessian is singular (min eigenvalue {eig:.3e})",
                               eigenvalue=eig)
    return np.linalg.inv(h)


def _stage_inverse(fit: StageFit):
    try:
        return checked_inverse(fit.h_sub)
    except SingularityError as exc:
        exc.model, exc.stage = fit.model.indices, fit.stage
        raise


def _check_radius(radius):
    if not (radius >= 0 and math.isfinite(radius)):
        raise ConfigurationError(f"radius must be finite and >= 0, got {radius}")


def hyperrect_halflengths(fit: StageFit, radius: float,
                          flavor="uposi-hyperrect") -> IntervalSet:
    """``||row_j(h^-1)||_1 * radius``: the bounding box of the h-weighted region."""
    _check_radius(radius)
    inv = _stage_inverse(fit)
    return IntervalSet(fit.model, fit.theta, np.abs(inv).sum(axis=1) * radius, flavor, radius)


def coord_halflengths(fit: StageFit, radius: float, flavor="uposi-coord") -> IntervalSet:
    """``(h^-1)_jj * radius``."""
    _check_radius(radius)
    inv = _stage_inverse(fit)
    return IntervalSet(fit.model, fit.theta, np.abs(np.diag(inv)) * radius, flavor, radius)


def conditional_halflengths(fit: StageFit, cond_radius: float) -> IntervalSet:
    return coord_halflengths(fit, cond_radius, flavor="uposi-coord-conditional")


def naive_intervals(fit: StageFit, theta_b_draws, alpha: float, min_B: int = 100) -> IntervalSet:
    """Per-coordinate bootstrap intervals that ignore the selection step."""
    T = np.asarray(theta_b_draws, dtype=float)
    if T.ndim != 2 or T.shape[1] != len(fit.model):
        raise ConfigurationError("theta_b_draws must be B x |model|")
    if T.shape[0] < min_B:
        raise ConfigurationError(f"need at least {min_B} draws, got {T.shape[0]}")
    dev = np.abs(T - fit.theta[None, :])
    half = np.array([upper_order_statistic(dev[:, j], alpha) for j in range(T.shape[1])])
    return IntervalSet(fit.model, fit.theta, half, "naive")


def stage_intervals(fit: StageFit, draws: BootstrapDraws, alpha: float) -> dict:
    """Every interval flavor for one stage, keyed by flavor name."""
    s = fit.stage
    r_comb = combined_radius(draws, s, fit.l1_norm, alpha)
    r_cond = conditional_radius(draws, s, alpha)
    return {
        "uposi-hyperrect": hyperrect_halflengths(fit, r_comb),
        "uposi-coord": coord_halflengths(fit, r_comb),
        "uposi-coord-conditional": conditional_halflengths(fit, r_cond),
        "uposi-hyperrect-conditional": hyperrect_halflengths(
            fit, r_cond, flavor="uposi-hyperrect-conditional"),
        "naive": naive_intervals(fit, draws.theta(s), alpha),
    }


# --------------------------------------------------------------------------
# tests and the restricted least-squares identity
# --------------------------------------------------------------------------

def test_null_zero(fit: StageFit, radius_at_zero: float) -> str:
    """``"reject"`` iff ``||h(m) theta_hat||_inf > radius_at_zero``."""
    _check_radius(radius_at_zero)
    stat = float(np.max(np.abs(fit.h_sub @ fit.theta)))
    return "reject" if stat > radius_at_zero else "retain"


test_null_zero.__test__ = False


def test_point_null(fit: StageFit, theta0, draws: BootstrapDraws, alpha: float) -> str:
    """Test ``theta = theta0`` with the radius evaluated at ``||theta0||_1``."""
    theta0 = np.asarray(theta0, dtype=float)
    if theta0.shape != fit.theta.shape:
        raise ConfigurationError("theta0 must match the model size")
    radius = combined_radius(draws, fit.stage, float(np.abs(theta0).sum()), alpha)
    stat = float(np.max(np.abs(fit.h_sub @ (fit.theta - theta0))))
    return "reject" if stat > radius else "retain"


test_point_null.__test__ = False


def restricted_ls(fit: StageFit, j: int, t: float) -> np.ndarray:
    """Minimizer of the stage quadratic under the constraint ``theta_j = t``.

    Closed form ``theta_hat + h^-1 e_j (t - theta_hat_j) / (h^-1)_jj``.
    """
    k = len(fit.model)
    if not 0 <= j < k:
        raise ConfigurationError(f"coordinate {j} outside model of size {k}")
    inv = _stage_inverse(fit)
    return fit.theta + inv[:, j] * ((t - fit.theta[j]) / inv[j, j])
