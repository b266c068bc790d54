"""Scikit-learn style front end for the two-stage fit and its inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .bootstrap import combined_radius, conditional_radius, run_bootstrap
from .data import Dataset, ModelSet, build_basis, subset_vector
from .engine import FitConfig, fit_two_stage, linear_predictor
from .exceptions import ConfigurationError
from .inference import FLAVORS, stage_intervals, test_null_zero, test_point_null
from .selection import SelectorSpec


class RobustQLearner(BaseEstimator):
    """Two-stage robust Q-learning with simultaneous post-selection intervals.

    Parameters
    ----------
    propensity2, outcome2, propensity1, outcome1 : str, dict, LearnerSpec or callable
        Nuisance learners. Stage-2 learners see ``(x1, a1, x2)``, stage-1
        learners see ``x1``.
    K : int
        Number of cross-fitting folds.
    selector : {"forward-stepwise", "lasso-path", "fixed"}
    size : int
        Columns selected beyond the intercept.
    cap2, cap1 : int or None
        Sparsity caps on the stage-2 and stage-1 models.
    hierarchy : bool
    model2, model1 : sequence of int, optional
        0-based fixed models, used when ``selector="fixed"``.
    B : int
        Bootstrap draws.
    multiplier : {"exponential", "two-point", "normal"}
    alpha : float
        One minus the nominal coverage.
    eps : float
        Propensity clamp.
    stage2_input : {"x2", "history"}
        What the stage-2 blip dictionary is evaluated on.
    interactions : bool
        Add pairwise interactions to both dictionaries.
    random_state : int
        Seed for folds and bootstrap multipliers.

    Attributes
    ----------
    fit_ : TwoStageFit
    draws_ : BootstrapDraws
    models_ : dict
        Stage to selected :class:`ModelSet`.
    coef_ : dict
        Stage to coefficient vector on the selected model.
    intervals_ : dict
        Stage to ``{flavor: IntervalSet}``.

    Examples
    --------
    >>> est = RobustQLearner(B=200, random_state=0).fit(X1, A1, X2, A2, y)  # doctest: +SKIP
    >>> est.predict(X2, stage=2)  # doctest: +SKIP
    """

    def __init__(self, propensity2="linear", outcome2="linear", propensity1="linear",
                 outcome1="linear", K=5, selector="forward-stepwise", size=5, cap2=6, cap1=6,
                 hierarchy=False, model2=None, model1=None, B=1000, multiplier="exponential",
                 alpha=0.05, eps=0.01, stage2_input="x2", interactions=False, random_state=0):
        self.propensity2 = propensity2
        self.outcome2 = outcome2
        self.propensity1 = propensity1
        self.outcome1 = outcome1
        self.K = K
        self.selector = selector
        self.size = size
        self.cap2 = cap2
        self.cap1 = cap1
        self.hierarchy = hierarchy
        self.model2 = model2
        self.model1 = model1
        self.B = B
        self.multiplier = multiplier
        self.alpha = alpha
        self.eps = eps
        self.stage2_input = stage2_input
        self.interactions = interactions
        self.random_state = random_state

    def _selector(self, model, cap):
        return SelectorSpec(kind=self.selector, size=self.size, model=model,
                            hierarchy=self.hierarchy, cap=cap)

    def _fit_config(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        return FitConfig(self.propensity2, self.outcome2, self.propensity1, self.outcome1,
                         K=self.K, seed=self.random_state,
                         selector2=self._selector(self.model2, self.cap2),
                         selector1=self._selector(self.model1, self.cap1), eps=self.eps)

    def fit(self, X1, A1, X2, A2, y):
        """Fit both stages and run the bootstrap."""
        X1 = check_array(X1, ensure_min_samples=2)
        X2 = check_array(X2, ensure_min_samples=2)
        ds = Dataset.from_arrays(X1, np.asarray(A1), X2, np.asarray(A2), np.asarray(y),
                                 stage2_input=self.stage2_input,
                                 interactions=self.interactions)
        return self.fit_dataset(ds)

    def fit_dataset(self, dataset: Dataset):
        """Fit on an existing :class:`Dataset` (its dictionaries are kept)."""
        config = self._fit_config()
        self.dataset_ = dataset
        self.fit_ = fit_two_stage(dataset, config)
        self.draws_ = run_bootstrap(self.fit_, dataset, self.B, self.multiplier,
                                    seed=self.random_state)
        self.models_ = {s: self.fit_.stage(s).model for s in (1, 2)}
        self.coef_ = {s: self.fit_.stage(s).theta for s in (1, 2)}
        self.intervals_ = {s: stage_intervals(self.fit_.stage(s), self.draws_, self.alpha)
                           for s in (1, 2)}
        self.n_features_in_ = dataset.x1.shape[1]
        return self

    def _basis(self, X, stage):
        check_is_fitted(self, "fit_")
        d = self.dataset_.dict1 if stage == 1 else self.dataset_.dict2
        return build_basis(check_array(X), d)

    def decision_function(self, X, stage=2):
        """Estimated blip ``W(m) . theta`` at the selected model.

        ``X`` holds raw stage inputs: ``x1`` for stage 1, and ``x2`` (or the
        full history when ``stage2_input="history"``) for stage 2.
        """
        if stage not in (1, 2):
            raise ConfigurationError("stage must be 1 or 2")
        W = subset_vector(self._basis(X, stage), self.models_[stage])
        return linear_predictor(W, self.coef_[stage])

    def predict(self, X, stage=2):
        """Recommended treatment ``1{blip > 0}``."""
        return (self.decision_function(X, stage) > 0).astype(int)

    def radii(self, stage):
        check_is_fitted(self, "fit_")
        sf = self.fit_.stage(stage)
        return {"combined": combined_radius(self.draws_, stage, sf.l1_norm, self.alpha),
                "conditional": conditional_radius(self.draws_, stage, self.alpha),
                "at_zero": combined_radius(self.draws_, stage, 0.0, self.alpha)}

    def null_test(self, stage, theta0=None):
        """Verdict for ``theta = 0`` (default) or ``theta = theta0``."""
        check_is_fitted(self, "fit_")
        sf = self.fit_.stage(stage)
        if theta0 is None:
            return test_null_zero(sf, self.radii(stage)["at_zero"])
        return test_point_null(sf, theta0, self.draws_, self.alpha)

    def summary(self):
        """One record per (stage, coordinate) with every interval flavor."""
        check_is_fitted(self, "fit_")
        rows = []
        for s in (2, 1):
            d = self.dataset_.dict1 if s == 1 else self.dataset_.dict2
            labels = d.labels()
            verdict = self.null_test(s)
            ivs = self.intervals_[s]
            m: ModelSet = self.models_[s]
            for j, idx in enumerate(m.indices):
                row = {"stage": s, "coordinate": idx + 1, "term": labels[idx],
                       "center": float(self.coef_[s][j])}
                for f in FLAVORS:
                    row[f"half_length_{f}"] = float(ivs[f].half_lengths[j])
                row["null_test"] = verdict
                rows.append(row)
        return rows
