"""Cross-fitted estimation of the conditional-mean nuisance functions.

Four nuisances are needed per dataset: the two treatment propensities, the
stage-2 outcome mean given the full stage-2 history, and the stage-1 mean of
the pseudo-outcome given ``x1``. Each is predicted out-of-fold: the value for
row ``i`` in fold ``k`` comes from a learner trained only on rows outside
fold ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.linear_model import LinearRegression
from sklearn.neighbors import KNeighborsRegressor
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import FoldPartition
from .exceptions import ConfigurationError

TARGET_KINDS = ("propensity-stage1", "propensity-stage2", "outcome-stage2",
                "pseudo-outcome-stage1")
LEARNER_KINDS = ("oracle", "linear", "knn", "kernel")
DEFAULT_EPS = 0.01


def clamp_propensity(p, eps=DEFAULT_EPS):
    """Clip probabilities into ``[eps, 1 - eps]``."""
    if not 0.0 < eps < 0.5:
        raise ConfigurationError(f"eps must lie in (0, 0.5), got {eps}")
    return np.minimum(np.maximum(p, eps), 1.0 - eps)


class OracleRegressor(RegressorMixin, BaseEstimator):
    """Wraps a known function; ``fit`` is a no-op.

    Parameters
    ----------
    func : callable
        Maps an ``(n, d)`` feature array to ``n`` values.
    """

    def __init__(self, func=None):
        self.func = func

    def fit(self, X, y=None):
        if self.func is None:
            raise ConfigurationError("OracleRegressor needs a function")
        self.fitted_ = True
        return self

    def predict(self, X):
        return np.asarray(self.func(np.asarray(X, dtype=float)), dtype=float).ravel()


class NadarayaWatsonRegressor(RegressorMixin, BaseEstimator):
    """Nadaraya-Watson regression with a product Gaussian kernel.

    Parameters
    ----------
    bandwidth : float or None
        Common bandwidth multiplier. ``None`` uses Scott's rule,
        ``n ** (-1 / (d + 4))`` times each coordinate's standard deviation.
    chunk_size : int
        Number of query rows evaluated at once.
    """

    def __init__(self, bandwidth=None, chunk_size=2048):
        self.bandwidth = bandwidth
        self.chunk_size = chunk_size

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        n, d = X.shape
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigurationError("bandwidth must be positive")
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        if self.bandwidth is None:
            h = n ** (-1.0 / (d + 4)) * sd
        else:
            h = self.bandwidth * sd
        self.bandwidths_ = h
        self.X_ = X / h
        self.y_ = y
        self.n_features_in_ = d
        return self

    def predict(self, X):
        check_is_fitted(self, "X_")
        Z = check_array(X) / self.bandwidths_
        out = np.empty(Z.shape[0])
        sq_train = np.einsum("ij,ij->i", self.X_, self.X_)
        for s in range(0, Z.shape[0], self.chunk_size):
            q = Z[s:s + self.chunk_size]
            d2 = (np.einsum("ij,ij->i", q, q)[:, None] + sq_train[None, :]
                  - 2.0 * q @ self.X_.T)
            logk = -0.5 * np.maximum(d2, 0.0)
            logk -= logk.max(axis=1, keepdims=True)
            k = np.exp(logk)
            out[s:s + self.chunk_size] = (k @ self.y_) / k.sum(axis=1)
        return out


@dataclass(frozen=True)
class LearnerSpec:
    """Choice of nuisance learner.

    ``kind`` is one of ``"oracle"`` (``func`` required), ``"linear"``,
    ``"knn"`` (uses ``k``) or ``"kernel"`` (uses ``bandwidth``, ``None`` for
    Scott's rule).
    """

    kind: str = "linear"
    k: int = 10
    bandwidth: float | None = None
    func: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ConfigurationError(f"unknown learner kind {self.kind!r}")
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigurationError("bandwidth must be > 0")
        if self.kind == "oracle" and self.func is None:
            raise ConfigurationError("oracle learner needs func")

    def make_estimator(self, n_train=None):
        if self.kind == "oracle":
            return OracleRegressor(self.func)
        if self.kind == "linear":
            return LinearRegression()
        if self.kind == "knn":
            k = self.k if n_train is None else min(self.k, n_train)
            return KNeighborsRegressor(n_neighbors=k)
        return NadarayaWatsonRegressor(bandwidth=self.bandwidth)

    def to_dict(self):
        out = {"kind": self.kind}
        if self.kind == "knn":
            out["k"] = self.k
        if self.kind == "kernel":
            out["bandwidth"] = self.bandwidth
        return out


def as_learner(spec) -> LearnerSpec:
    """Accept a LearnerSpec, a kind string, a dict, or a callable (oracle)."""
    if isinstance(spec, LearnerSpec):
        return spec
    if isinstance(spec, str):
        return LearnerSpec(spec)
    if isinstance(spec, dict):
        return LearnerSpec(**spec)
    if callable(spec):
        return LearnerSpec("oracle", func=spec)
    raise ConfigurationError(f"cannot interpret learner spec {spec!r}")


@dataclass(frozen=True, eq=False)
class CrossFitPredictions:
    """Out-of-fold predictions for one nuisance function.

    ``model_tag`` records the stage-2 model whose pseudo-outcome was the
    regression target (stage-1 outcome nuisance only).
    """

    values: np.ndarray
    target_kind: str
    diagnostics: dict = field(default_factory=dict)
    model_tag: object = None

    def __post_init__(self):
        if self.target_kind not in TARGET_KINDS:
            raise ConfigurationError(f"unknown target kind {self.target_kind!r}")
        v = np.array(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]


def crossfit_predict(learner, features, targets, folds: FoldPartition,
                     target_kind="outcome-stage2", eps=DEFAULT_EPS, model_tag=None):
    """Out-of-fold predictions of ``targets`` given ``features``.

    Propensity predictions from trained learners are clamped to
    ``[eps, 1 - eps]``; oracle predictions are returned untouched. A kNN or
    kernel learner whose training targets are constant predicts the
    training mean, and the fold is listed in ``diagnostics["degenerate_folds"]``.

    Returns
    -------
    CrossFitPredictions
    """
    learner = as_learner(learner)
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    t = np.asarray(targets, dtype=float).ravel()
    n = X.shape[0]
    if t.shape[0] != n or folds.n != n:
        raise ConfigurationError(
            f"features ({n} rows), targets ({t.shape[0]}) and folds ({folds.n}) disagree")
    is_prop = target_kind.startswith("propensity")
    diagnostics = {"learner": learner.to_dict(), "degenerate_folds": [], "n_clamped": 0}

    if learner.kind == "oracle":
        values = OracleRegressor(learner.func).fit(X).predict(X)
        if values.shape[0] != n:
            raise ConfigurationError("oracle function returned the wrong number of values")
        return CrossFitPredictions(values, target_kind, diagnostics, model_tag)

    values = np.empty(n)
    for k in range(folds.K):
        test = folds.folds[k]
        train = folds.complement(k)
        yt = t[train]
        if learner.kind in ("knn", "kernel") and np.all(yt == yt[0]):
            values[test] = yt.mean()
            diagnostics["degenerate_folds"].append(k)
            continue
        est = clone(learner.make_estimator(n_train=train.size))
        est.fit(X[train], yt)
        values[test] = est.predict(X[test])
    if is_prop:
        clamped = clamp_propensity(values, eps)
        diagnostics["n_clamped"] = int(np.sum(clamped != values))
        values = clamped
    return CrossFitPredictions(values, target_kind, diagnostics, model_tag)
