"""Data-driven submodel selection on the centered regression.

Selectors work on the transformed design ``R = (a - mu_a) * W`` and response
``r = response - mu_response``; least squares of ``r`` on ``R`` solves the
same normal equations as the stage engine. Ties are always broken towards
the lowest column index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import lasso_path

from .data import FeatureDictionary, ModelSet, Term
from .exceptions import ConfigurationError

SELECTOR_KINDS = ("fixed", "forward-stepwise", "lasso-path")


@dataclass(frozen=True)
class SelectorSpec:
    """How to pick the model at one stage.

    Parameters
    ----------
    kind : {"fixed", "forward-stepwise", "lasso-path"}
    size : int
        Number of columns chosen on top of the forced ones.
    model : tuple of int, optional
        0-based indices for ``kind="fixed"``.
    hierarchy : bool
        Add the main effects of every selected interaction.
    cap : int, optional
        Sparsity cap on the final model size.
    force_intercept : bool
        Always include the intercept column when the dictionary has one.
    """

    kind: str = "forward-stepwise"
    size: int = 5
    model: tuple | None = None
    hierarchy: bool = False
    cap: int | None = None
    force_intercept: bool = True

    def __post_init__(self):
        if self.kind not in SELECTOR_KINDS:
            raise ConfigurationError(f"unknown selector kind {self.kind!r}")
        if self.size < 0:
            raise ConfigurationError("size must be >= 0")
        if self.cap is not None:
            if self.cap < 1:
                raise ConfigurationError("cap must be >= 1")
            if self.kind != "fixed" and self.size > self.cap:
                raise ConfigurationError(f"size {self.size} exceeds cap {self.cap}")
        if self.kind == "fixed":
            if self.model is None:
                raise ConfigurationError("fixed selector needs a model")
            model = tuple(self.model.indices if isinstance(self.model, ModelSet) else self.model)
            object.__setattr__(self, "model", model)
            if self.cap is not None and len(set(model)) > self.cap:
                raise ConfigurationError(f"fixed model has {len(model)} terms, cap is {self.cap}")

    def to_dict(self):
        out = {"kind": self.kind, "size": self.size, "hierarchy": self.hierarchy,
               "cap": self.cap, "force_intercept": self.force_intercept}
        if self.model is not None:
            out["model"] = [i + 1 for i in self.model]
        return out


def transformed_design(basis, a, mu_a, response, mu_resp):
    """Centered regression ``(R, r)`` with ``R = (a - mu_a) W`` and ``r = response - mu_resp``."""
    W = np.asarray(basis, dtype=float)
    ra = np.asarray(a, dtype=float) - _values(mu_a)
    r = np.asarray(response, dtype=float) - _values(mu_resp)
    if W.shape[0] != ra.shape[0] or r.shape[0] != ra.shape[0]:
        raise ConfigurationError("transformed_design inputs must share their length")
    return ra[:, None] * W, r


def _values(v):
    return np.asarray(getattr(v, "values", v), dtype=float).ravel()


def _check_sizes(p, size, forced, cap):
    if size > p:
        raise ConfigurationError(f"size {size} exceeds the number of columns {p}")
    limit = p if cap is None else min(p, cap)
    if size + len(forced) > limit:
        raise ConfigurationError(
            f"size {size} plus {len(forced)} forced columns exceeds min(p, cap) = {limit}")
    if any(not 0 <= f < p for f in forced):
        raise ConfigurationError("forced index out of range")


def _orthonormal(R, cols):
    if not cols:
        return np.zeros((R.shape[0], 0))
    Q, _ = np.linalg.qr(R[:, list(cols)])
    return Q


def forward_stepwise(R, r, size, forced=(), stage=1, cap=None, return_path=False):
    """Greedy forward selection by residual-sum-of-squares reduction.

    Starts from ``forced`` and adds ``size`` columns, each time the one whose
    inclusion lowers the RSS the most (lowest index on ties).

    Returns
    -------
    ModelSet, or ``(ModelSet, order, rss)`` when ``return_path`` is set, where
    ``rss[k]`` is the RSS after ``k`` additions.
    """
    R = np.asarray(R, dtype=float)
    r = np.asarray(r, dtype=float).ravel()
    n, p = R.shape
    forced = sorted(set(int(f) for f in forced))
    _check_sizes(p, size, forced, cap)
    if size + len(forced) == 0:
        raise ConfigurationError("selection would return an empty model")

    Q = _orthonormal(R, forced)
    resid = r - Q @ (Q.T @ r)
    Rres = R - Q @ (Q.T @ R)
    col_scale = np.einsum("ij,ij->j", R, R)
    active = list(forced)
    order = []
    rss = [float(resid @ resid)]
    for _ in range(size):
        norms = np.einsum("ij,ij->j", Rres, Rres)
        ok = norms > 1e-12 * np.maximum(col_scale, 1e-300)
        ok[active] = False
        if not ok.any():
            break
        score = np.full(p, -np.inf)
        score[ok] = (Rres[:, ok].T @ resid) ** 2 / norms[ok]
        j = int(np.argmax(score))
        q = Rres[:, j] / np.sqrt(norms[j])
        for _ in range(2):
            resid = resid - q * (q @ resid)
            Rres = Rres - np.outer(q, q @ Rres)
        Rres[:, j] = 0.0
        active.append(j)
        order.append(j)
        rss.append(float(resid @ resid))
    model = ModelSet.of(active, stage)
    if return_path:
        return model, order, rss
    return model


def lasso_entry_order(R, r, forced=(), alphas=None, n_alphas=300, eps=1e-4):
    """Order in which columns become active along a decreasing lasso path.

    Forced columns are unpenalized: they are partialled out of both ``R`` and
    ``r`` before running coordinate descent on the rest. The penalty follows
    the ``(1 / 2n) ||r - R b||^2 + alpha ||b||_1`` convention.

    Returns
    -------
    order : list of int
        Distinct column indices in order of first entry.
    alphas : ndarray
        The grid that was used.
    """
    R = np.asarray(R, dtype=float)
    r = np.asarray(r, dtype=float).ravel()
    n, p = R.shape
    forced = sorted(set(int(f) for f in forced))
    free = [j for j in range(p) if j not in forced]
    Q = _orthonormal(R, forced)
    Rf = R[:, free] - Q @ (Q.T @ R[:, free])
    rf = r - Q @ (Q.T @ r)
    alpha_max = np.max(np.abs(Rf.T @ rf)) / n if free else 0.0
    if alphas is None:
        if alpha_max <= 0:
            return [], np.array([])
        alphas = alpha_max * np.logspace(0, np.log10(eps), n_alphas)
    alphas = np.sort(np.asarray(alphas, dtype=float))[::-1]
    if not free:
        return [], alphas
    _, coefs, _ = lasso_path(Rf, rf, alphas=alphas, max_iter=10000, tol=1e-8)
    order = []
    seen = set()
    for step in range(coefs.shape[1]):
        for k in np.flatnonzero(coefs[:, step] != 0):
            j = free[k]
            if j not in seen:
                seen.add(j)
                order.append(j)
    return order, alphas


def lasso_path_select(R, r, size, forced=(), stage=1, cap=None, n_alphas=300, eps=1e-4):
    """Forced columns plus the first ``size`` columns to enter the lasso path.

    Returns ``(ModelSet, info)``; ``info["incomplete"]`` is set when fewer
    than ``size`` columns ever became active.
    """
    R = np.asarray(R, dtype=float)
    p = R.shape[1]
    forced = sorted(set(int(f) for f in forced))
    _check_sizes(p, size, forced, cap)
    order, _ = lasso_entry_order(R, r, forced, n_alphas=n_alphas, eps=eps)
    chosen = order[:size]
    info = {"entry_order": chosen, "incomplete": len(chosen) < size}
    if not forced and not chosen:
        raise ConfigurationError("lasso path activated no column and nothing is forced")
    return ModelSet.of(forced + chosen, stage), info


def enforce_hierarchy(m: ModelSet, dictionary: FeatureDictionary, cap=None):
    """Add the main effects of every interaction present in ``m``.

    Returns ``(model, relaxed)`` where ``relaxed`` signals the result went
    over ``cap`` (a warning is also emitted).
    """
    add = set(m.indices)
    for idx in m.indices:
        t = dictionary.terms[idx]
        if t.kind == "interaction":
            add.add(dictionary.index_of(Term("main", t.i)))
            add.add(dictionary.index_of(Term("main", t.j)))
    out = ModelSet.of(add, m.stage)
    relaxed = cap is not None and len(out) > cap
    if relaxed:
        warnings.warn(
            f"hierarchy closure of stage-{m.stage} model has {len(out)} terms, above cap {cap}",
            stacklevel=2)
    return out, relaxed


def forced_indices(spec: SelectorSpec, dictionary: FeatureDictionary):
    if spec.force_intercept and dictionary.intercept_index is not None:
        return [dictionary.intercept_index]
    return []


def select_model(spec: SelectorSpec, R, r, dictionary: FeatureDictionary):
    """Run the configured selector and optional hierarchy closure.

    Returns ``(ModelSet, info)``.
    """
    stage = dictionary.stage
    p = dictionary.p
    forced = forced_indices(spec, dictionary)
    info = {"kind": spec.kind, "forced": list(forced), "hierarchy_relaxed": False}
    if spec.kind == "fixed":
        model = ModelSet.of(spec.model, stage)
        if model.indices[-1] >= p:
            raise ConfigurationError(f"fixed model index {model.indices[-1]} >= p = {p}")
    elif spec.kind == "forward-stepwise":
        model, order, rss = forward_stepwise(R, r, spec.size, forced, stage, spec.cap,
                                             return_path=True)
        info.update(entry_order=order, rss=rss, incomplete=len(order) < spec.size)
    else:
        model, extra = lasso_path_select(R, r, spec.size, forced, stage, spec.cap)
        info.update(extra)
    if spec.hierarchy:
        model, relaxed = enforce_hierarchy(model, dictionary, spec.cap)
        info["hierarchy_relaxed"] = relaxed
    return model, info
