"""Gradient/Hessian summaries, normal-equation solves and the two-stage fit.

Every sum over observations goes through :func:`weighted_row_means`, which
reduces in a fixed row order. The unperturbed quantities are the special case
of all-ones multipliers, so a bootstrap draw with ``omega == 1`` reproduces
them bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ModelSet, make_folds, subset_matrix, subset_vector
from .exceptions import ConfigurationError, NumericalError, SingularityError
from .nuisance import DEFAULT_EPS, CrossFitPredictions, LearnerSpec, as_learner, crossfit_predict
from .selection import SelectorSpec, select_model, transformed_design

EIG_THRESHOLD = 1e-10
RESIDUAL_TOL = 1e-10
GRAM_FLAVORS = ("crossfit", "oracle", "population-mc", "conditional", "perturbed")
_CHUNK_ELEMS = 4_000_000


def _values(v):
    return np.asarray(getattr(v, "values", v), dtype=float).ravel()


def weighted_row_means(weights, rows):
    """``(1/n) * sum_i weights[b, i] * rows[i]`` for every ``b``.

    Parameters
    ----------
    weights : ndarray of shape (B, n)
    rows : ndarray of shape (n, d)

    Returns
    -------
    ndarray of shape (B, d)
    """
    weights = np.asarray(weights, dtype=float)
    rows = np.asarray(rows, dtype=float)
    B, n = weights.shape
    d = rows.shape[1]
    out = np.empty((B, d))
    step = max(1, _CHUNK_ELEMS // max(1, n * d))
    for s in range(0, B, step):
        out[s:s + step] = (weights[s:s + step, :, None] * rows[None, :, :]).sum(axis=1)
    return out / n


def _multipliers(multipliers, n):
    if multipliers is None:
        return np.ones((1, n))
    w = np.asarray(multipliers, dtype=float)
    return w[None, :] if w.ndim == 1 else w


def _check_n(n):
    if n == 0:
        raise ConfigurationError("cannot form summaries from zero observations")


def hessian_rows(basis, a, mu_a):
    """Per-observation Hessian contributions ``(a - mu)^2 W W^T``, flattened."""
    W = np.asarray(basis, dtype=float)
    ra = np.asarray(a, dtype=float) - _values(mu_a)
    outer = (W[:, :, None] * W[:, None, :]).reshape(W.shape[0], -1)
    return (ra * ra)[:, None] * outer


def gram_hessian(basis, a, mu_a, multipliers=None):
    """``(1/n) sum_i omega_i (a_i - mu_i)^2 W_i W_i^T``.

    With a ``(B, n)`` multiplier array the result has shape ``(B, p, p)``.
    """
    W = np.asarray(basis, dtype=float)
    n, p = W.shape
    _check_n(n)
    if len(a) != n or len(_values(mu_a)) != n:
        raise ConfigurationError("basis, treatments and propensities must share n")
    om = _multipliers(multipliers, n)
    H = weighted_row_means(om, hessian_rows(W, a, mu_a)).reshape(-1, p, p)
    return H[0] if np.ndim(multipliers) < 2 else H


def gradient_rows(basis, a, mu_a):
    W = np.asarray(basis, dtype=float)
    ra = np.asarray(a, dtype=float) - _values(mu_a)
    return ra[:, None] * W


def grad_stage2(basis2, a2, mu_a2, y, mu_y2, multipliers=None):
    """``(1/n) sum_i omega_i W_i (a2_i - muA_i)(y_i - muY_i)``."""
    W = np.asarray(basis2, dtype=float)
    n = W.shape[0]
    _check_n(n)
    ry = np.asarray(y, dtype=float) - _values(mu_y2)
    if ry.shape[0] != n:
        raise ConfigurationError("basis and outcome lengths differ")
    om = _multipliers(multipliers, n)
    G = weighted_row_means(om * ry[None, :], gradient_rows(W, a2, mu_a2))
    return G[0] if np.ndim(multipliers) < 2 else G


def grad_stage1(basis1, a1, mu_a1, pseudo, mu_y1, multipliers=None, m2=None):
    """``(1/n) sum_i omega_i W_i (a1_i - muA_i)(Yhat_i - muY_i)``.

    ``pseudo`` may be a vector or, for batched bootstrap draws, a ``(B, n)``
    array matching ``multipliers``. When ``m2`` is given it must match the
    stage-2 model the outcome nuisance was trained against.
    """
    if m2 is not None:
        tag = getattr(mu_y1, "model_tag", None)
        if tag is not None and tag != m2:
            raise ConfigurationError(
                f"stage-1 outcome nuisance was trained for stage-2 model {tag.indices}, "
                f"pseudo-outcome uses {m2.indices}")
    W = np.asarray(basis1, dtype=float)
    n = W.shape[0]
    _check_n(n)
    P = np.asarray(pseudo, dtype=float)
    rp = P - _values(mu_y1)
    om = _multipliers(multipliers, n)
    if rp.ndim == 1:
        rp = rp[None, :]
    G = weighted_row_means(om * rp, gradient_rows(W, a1, mu_a1))
    batched = np.ndim(multipliers) == 2 or np.ndim(pseudo) == 2
    return G if batched else G[0]


# --------------------------------------------------------------------------
# normal equations
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GramPair:
    """Gradient vector ``g`` and Hessian ``h`` of one stage's quadratic objective."""

    g: np.ndarray
    h: np.ndarray
    stage: int
    flavor: str = "crossfit"

    def __post_init__(self):
        g = np.array(self.g, dtype=float)
        h = np.array(self.h, dtype=float)
        if self.flavor not in GRAM_FLAVORS:
            raise ConfigurationError(f"unknown gram flavor {self.flavor!r}")
        if h.shape != (g.shape[0], g.shape[0]):
            raise ConfigurationError(f"g has length {g.shape[0]} but h has shape {h.shape}")
        scale = max(1.0, float(np.max(np.abs(h)))) if h.size else 1.0
        if np.max(np.abs(h - h.T), initial=0.0) > 1e-12 * scale:
            raise NumericalError("Hessian is not symmetric")
        g.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "h", h)

    @property
    def p(self):
        return self.g.shape[0]


def cholesky_solve(H, g):
    """Solve ``H theta = g`` for a stack of SPD systems.

    ``H`` has shape ``(B, k, k)`` and ``g`` shape ``(B, k)``. Forward and back
    substitution run column by column, so each system's result does not
    depend on the batch it was solved in.
    """
    L = np.linalg.cholesky(H)
    B, k, _ = H.shape
    z = np.empty((B, k))
    for i in range(k):
        z[:, i] = (g[:, i] - np.einsum("bj,bj->b", L[:, i, :i], z[:, :i])) / L[:, i, i]
    x = np.empty((B, k))
    for i in range(k - 1, -1, -1):
        x[:, i] = (z[:, i] - np.einsum("bj,bj->b", L[:, i + 1:, i], x[:, i + 1:])) / L[:, i, i]
    return x


# Running record of every normal-equation solve in this process.
RESIDUAL_LOG = {"solves": 0, "max_relative": 0.0}


def solve_batch(H, g, stage=None, models=None, raise_on_singular=True):
    """Batched normal-equation solve with eigenvalue and residual checks.

    Returns ``(theta, ok)``; rows with ``ok == False`` are singular and hold NaN.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    eig = np.linalg.eigvalsh(H)[:, 0]
    ok = eig > EIG_THRESHOLD
    if raise_on_singular and not ok.all():
        b = int(np.flatnonzero(~ok)[0])
        raise SingularityError(
            f"stage-{stage} submodel {models} Hessian is singular "
            f"(min eigenvalue {eig[b]:.3e} <= {EIG_THRESHOLD:g})",
            model=models, eigenvalue=float(eig[b]), stage=stage)
    theta = np.full(g.shape, np.nan)
    if ok.any():
        theta[ok] = cholesky_solve(H[ok], g[ok])
        resid = np.max(np.abs(g[ok] - np.einsum("bij,bj->bi", H[ok], theta[ok])), axis=1)
        scale = 1.0 + np.max(np.abs(g[ok]), axis=1)
        bound = RESIDUAL_TOL * scale
        RESIDUAL_LOG["solves"] += int(ok.sum())
        RESIDUAL_LOG["max_relative"] = max(RESIDUAL_LOG["max_relative"],
                                           float(np.max(resid / scale)))
        if np.any(resid > bound):
            raise NumericalError(
                f"stage-{stage} normal-equation residual {resid.max():.3e} exceeds tolerance")
    return theta, ok


def solve_normal(gram: GramPair, m: ModelSet) -> np.ndarray:
    """Coefficients solving ``h(m) theta = g(m)``.

    Raises :class:`SingularityError` when the smallest eigenvalue of ``h(m)``
    is at most ``1e-10``.
    """
    h = subset_matrix(gram.h, m)
    g = subset_vector(gram.g, m)
    theta, _ = solve_batch(h[None], g[None], stage=gram.stage, models=m.indices)
    return theta[0]


def normal_residual(gram: GramPair, m: ModelSet, theta) -> float:
    return float(np.max(np.abs(subset_vector(gram.g, m) - subset_matrix(gram.h, m) @ theta)))


@dataclass(frozen=True, eq=False)
class StageFit:
    """Selected model and coefficients for one stage."""

    stage: int
    model: ModelSet
    theta: np.ndarray
    gram: GramPair
    selection: dict = field(default_factory=dict)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if theta.shape != (len(self.model),):
            raise ConfigurationError("theta length must equal model size")
        g_inf = float(np.max(np.abs(self.gram.g)))
        if normal_residual(self.gram, self.model, theta) > RESIDUAL_TOL * (1.0 + g_inf):
            raise NumericalError(f"stage-{self.stage} residual invariant violated")

    @property
    def l1_norm(self) -> float:
        return float(np.sum(np.abs(self.theta)))

    @property
    def h_sub(self) -> np.ndarray:
        return subset_matrix(self.gram.h, self.model)

    @property
    def g_sub(self) -> np.ndarray:
        return subset_vector(self.gram.g, self.model)


# --------------------------------------------------------------------------
# blip and pseudo-outcome
# --------------------------------------------------------------------------

def blip_xi(a2, x, theta) -> float:
    """``s * (1{s > 0} - a2)`` with ``s = x . theta``; the indicator is strict."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if x.shape != theta.shape:
        raise ConfigurationError("x and theta must have the same length")
    s = float(np.sum(x * theta))
    return s * (float(s > 0) - a2)


def linear_predictor(X, theta):
    """Row-wise ``X @ theta`` with a batch-independent reduction order.

    ``theta`` may be ``(k,)`` or a stack ``(B, k)``; output is ``(n,)`` or ``(B, n)``.
    """
    X = np.asarray(X, dtype=float)
    T = np.asarray(theta, dtype=float)
    if T.ndim == 1:
        return (X * T[None, :]).sum(axis=1)
    return (T[:, None, :] * X[None, :, :]).sum(axis=2)


def blip_values(a2, X, theta):
    s = linear_predictor(X, theta)
    return s * ((s > 0).astype(float) - np.asarray(a2, dtype=float))


def pseudo_outcome(y, a2, basis2, m2: ModelSet, theta2):
    """``y + xi(a2, W2(m2); theta2)``; batched when ``theta2`` is ``(B, |m2|)``."""
    X = subset_vector(np.asarray(basis2, dtype=float), m2)
    theta2 = np.asarray(theta2, dtype=float)
    if theta2.shape[-1] != len(m2):
        raise ConfigurationError("theta2 length must equal |m2|")
    return np.asarray(y, dtype=float) + blip_values(a2, X, theta2)


# --------------------------------------------------------------------------
# full two-stage fit
# --------------------------------------------------------------------------

@dataclass
class FitConfig:
    """Settings for :func:`fit_two_stage`.

    Learners accept a :class:`LearnerSpec`, a kind string, or a callable
    (treated as an oracle). Stage-2 nuisances see the full history
    ``(x1, a1, x2)``; stage-1 nuisances see ``x1``.
    """

    propensity2: object = "linear"
    outcome2: object = "linear"
    propensity1: object = "linear"
    outcome1: object = "linear"
    K: int = 5
    seed: int = 0
    selector2: SelectorSpec = field(default_factory=lambda: SelectorSpec(cap=6))
    selector1: SelectorSpec = field(default_factory=lambda: SelectorSpec(cap=6))
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        for name in ("propensity2", "outcome2", "propensity1", "outcome1"):
            setattr(self, name, as_learner(getattr(self, name)))
        if self.K < 2:
            raise ConfigurationError("K must be >= 2")


@dataclass(frozen=True, eq=False)
class TwoStageFit:
    stage2: StageFit
    stage1: StageFit
    pseudo_outcomes: np.ndarray
    nuisances: dict
    folds: object
    config: FitConfig

    def stage(self, s: int) -> StageFit:
        return self.stage1 if s == 1 else self.stage2

    def to_report(self, dataset: Dataset | None = None) -> dict:
        """JSON-ready summary; model indices are 1-based."""
        out = {"stages": {}, "nuisances": {}}
        for s in (2, 1):
            sf = self.stage(s)
            labels = None
            if dataset is not None:
                d = dataset.dict1 if s == 1 else dataset.dict2
                labels = [d.labels()[i] for i in sf.model.indices]
            out["stages"][str(s)] = {
                "model": sf.model.one_based(),
                "terms": labels,
                "theta": [float(v) for v in sf.theta],
                "l1_norm": sf.l1_norm,
                "condition_number": float(np.linalg.cond(sf.h_sub)),
                "full_condition_number": float(np.linalg.cond(sf.gram.h)),
                "selection": _jsonable(sf.selection),
            }
        for name, pred in self.nuisances.items():
            out["nuisances"][name] = {
                "target": pred.target_kind,
                **_jsonable(pred.diagnostics),
                "mean": float(np.mean(pred.values)),
                "min": float(np.min(pred.values)),
                "max": float(np.max(pred.values)),
            }
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _stage_context(exc, stage):
    if isinstance(exc, SingularityError) and exc.stage is None:
        exc.stage = stage
    return exc


def fit_two_stage(dataset: Dataset, config: FitConfig | None = None) -> TwoStageFit:
    """Cross-fit nuisances, select, and solve both stages (stage 2 first).

    The stage-1 outcome nuisance regresses the stage-2 pseudo-outcome on
    ``x1`` and is tagged with the selected stage-2 model.
    """
    config = config or FitConfig()
    n = dataset.n
    folds = make_folds(n, config.K, config.seed)
    H2 = dataset.history2

    mu2a = crossfit_predict(config.propensity2, H2, dataset.a2, folds,
                            "propensity-stage2", config.eps)
    mu2y = crossfit_predict(config.outcome2, H2, dataset.y, folds, "outcome-stage2", config.eps)
    gram2 = GramPair(grad_stage2(dataset.phi2, dataset.a2, mu2a, dataset.y, mu2y),
                     gram_hessian(dataset.phi2, dataset.a2, mu2a), 2)
    R2, r2 = transformed_design(dataset.phi2, dataset.a2, mu2a, dataset.y, mu2y)
    m2, info2 = select_model(config.selector2, R2, r2, dataset.dict2)
    try:
        theta2 = solve_normal(gram2, m2)
    except SingularityError as exc:
        raise _stage_context(exc, 2)
    stage2 = StageFit(2, m2, theta2, gram2, info2)

    pseudo = pseudo_outcome(dataset.y, dataset.a2, dataset.phi2, m2, theta2)
    mu1a = crossfit_predict(config.propensity1, dataset.x1, dataset.a1, folds,
                            "propensity-stage1", config.eps)
    mu1y = crossfit_predict(config.outcome1, dataset.x1, pseudo, folds,
                            "pseudo-outcome-stage1", config.eps, model_tag=m2)
    gram1 = GramPair(grad_stage1(dataset.phi1, dataset.a1, mu1a, pseudo, mu1y, m2=m2),
                     gram_hessian(dataset.phi1, dataset.a1, mu1a), 1)
    R1, r1 = transformed_design(dataset.phi1, dataset.a1, mu1a, pseudo, mu1y)
    m1, info1 = select_model(config.selector1, R1, r1, dataset.dict1)
    try:
        theta1 = solve_normal(gram1, m1)
    except SingularityError as exc:
        raise _stage_context(exc, 1)
    stage1 = StageFit(1, m1, theta1, gram1, info1)

    pseudo = np.array(pseudo)
    pseudo.setflags(write=False)
    nuisances = {"propensity2": mu2a, "outcome2": mu2y, "propensity1": mu1a, "outcome1": mu1y}
    return TwoStageFit(stage2, stage1, pseudo, nuisances, folds, config)
