"""Trajectories, feature dictionaries, submodel index sets and fold partitions.

Model indices are 0-based everywhere inside the package. Reports convert
them to 1-based through :meth:`ModelSet.one_based`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigurationError

FOLD_STREAM = 0x464F4C44  # "FOLD"


class InputFormatError(ConfigurationError):
    """Malformed trajectory file; carries the 1-based line and column name."""

    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


# --------------------------------------------------------------------------
# feature dictionaries
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Term:
    """One column of a feature dictionary.

    ``kind`` is ``"intercept"``, ``"main"`` (uses ``i``) or ``"interaction"``
    (uses ``i < j``).
    """

    kind: str
    i: int | None = None
    j: int | None = None

    def __post_init__(self):
        if self.kind == "intercept":
            if self.i is not None or self.j is not None:
                raise ConfigurationError("intercept term takes no indices")
        elif self.kind == "main":
            if self.i is None or self.i < 0 or self.j is not None:
                raise ConfigurationError(f"bad main-effect term {self!r}")
        elif self.kind == "interaction":
            if self.i is None or self.j is None or not 0 <= self.i < self.j:
                raise ConfigurationError(f"bad interaction term {self!r}")
        else:
            raise ConfigurationError(f"unknown term kind {self.kind!r}")

    def max_index(self) -> int:
        return max(v for v in (self.i, self.j, -1) if v is not None)

    def label(self, names: Sequence[str] | None = None) -> str:
        def nm(k):
            return names[k] if names is not None else f"v{k + 1}"

        if self.kind == "intercept":
            return "(intercept)"
        if self.kind == "main":
            return nm(self.i)
        return f"{nm(self.i)}:{nm(self.j)}"

    def to_dict(self):
        out = {"kind": self.kind}
        if self.i is not None:
            out["i"] = self.i
        if self.j is not None:
            out["j"] = self.j
        return out


@dataclass(frozen=True)
class FeatureDictionary:
    """Ordered list of terms mapping a raw history vector to a basis row.

    Parameters
    ----------
    stage : {1, 2}
    terms : tuple of Term
        Intercept, if present, must be term 0. No duplicates.
    input_dim : int
        Length of the raw vectors the dictionary is evaluated on.
    input_names : tuple of str, optional
        Names of the raw inputs, used for term labels in reports.
    """

    stage: int
    terms: tuple
    input_dim: int
    input_names: tuple | None = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        terms = tuple(self.terms)
        object.__setattr__(self, "terms", terms)
        if not terms:
            raise ConfigurationError("feature dictionary needs at least one term")
        if len(set(terms)) != len(terms):
            raise ConfigurationError("feature dictionary contains duplicate terms")
        for k, t in enumerate(terms):
            if t.kind == "intercept" and k != 0:
                raise ConfigurationError("the intercept must be term 0")
            if t.max_index() >= self.input_dim:
                raise ConfigurationError(
                    f"term {t.label()} reads input {t.max_index()} but input_dim={self.input_dim}"
                )
        if self.input_names is not None:
            names = tuple(self.input_names)
            if len(names) != self.input_dim:
                raise ConfigurationError("input_names length must equal input_dim")
            object.__setattr__(self, "input_names", names)

    @classmethod
    def main_effects(cls, input_dim, stage, intercept=True, interactions=False,
                     input_names=None):
        """Intercept, all main effects and (optionally) all pairwise products."""
        terms = [Term("intercept")] if intercept else []
        terms += [Term("main", i) for i in range(input_dim)]
        if interactions:
            terms += [Term("interaction", i, j)
                      for i in range(input_dim) for j in range(i + 1, input_dim)]
        return cls(stage, tuple(terms), input_dim, input_names)

    @property
    def p(self) -> int:
        return len(self.terms)

    @property
    def intercept_index(self) -> int | None:
        return 0 if self.terms[0].kind == "intercept" else None

    def index_of(self, term: Term) -> int:
        try:
            return self.terms.index(term)
        except ValueError:
            raise ConfigurationError(f"term {term.label()} not in dictionary") from None

    def labels(self) -> list[str]:
        return [t.label(self.input_names) for t in self.terms]

    def to_dict(self):
        return {
            "stage": self.stage,
            "input_dim": self.input_dim,
            "terms": [t.to_dict() for t in self.terms],
        }


def build_basis(rows, dictionary: FeatureDictionary) -> np.ndarray:
    """Evaluate ``dictionary`` on every raw row.

    Returns an ``(n, p)`` array whose column order is the term order.
    """
    X = np.asarray(rows, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dictionary.input_dim:
        raise ConfigurationError(
            f"raw rows have shape {X.shape}, dictionary expects {dictionary.input_dim} columns"
        )
    out = np.empty((X.shape[0], dictionary.p))
    for k, t in enumerate(dictionary.terms):
        if t.kind == "intercept":
            out[:, k] = 1.0
        elif t.kind == "main":
            out[:, k] = X[:, t.i]
        else:
            out[:, k] = X[:, t.i] * X[:, t.j]
    return out


# --------------------------------------------------------------------------
# submodels
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSet:
    """Sorted, non-empty set of 0-based column indices for one stage."""

    indices: tuple
    stage: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ConfigurationError("a model must contain at least one index")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigurationError(f"model indices must be strictly increasing: {idx}")
        if idx[0] < 0:
            raise ConfigurationError("model indices must be non-negative")
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def of(cls, indices: Iterable[int], stage: int) -> "ModelSet":
        """Build from any iterable; duplicates are dropped and order sorted."""
        return cls(tuple(sorted(set(int(i) for i in indices))), stage)

    @classmethod
    def full(cls, p: int, stage: int) -> "ModelSet":
        return cls(tuple(range(p)), stage)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, item):
        return item in self.indices

    def one_based(self) -> list[int]:
        return [i + 1 for i in self.indices]

    def positions_in(self, other: "ModelSet") -> list[int]:
        """Positions of this model's indices inside the larger ``other``."""
        lookup = {v: k for k, v in enumerate(other.indices)}
        try:
            return [lookup[i] for i in self.indices]
        except KeyError:
            raise ConfigurationError(f"{self.indices} is not a subset of {other.indices}") from None


def _check_model(m: ModelSet, p: int):
    if m.indices[-1] >= p:
        raise ConfigurationError(f"model index {m.indices[-1]} out of range for dimension {p}")


def subset_vector(v, m: ModelSet) -> np.ndarray:
    v = np.asarray(v)
    _check_model(m, v.shape[-1])
    return v[..., list(m.indices)]


def subset_matrix(A, m: ModelSet) -> np.ndarray:
    A = np.asarray(A)
    if A.shape[-1] != A.shape[-2]:
        raise ConfigurationError(f"expected a square matrix, got shape {A.shape}")
    _check_model(m, A.shape[-1])
    idx = np.asarray(m.indices)
    return A[..., idx[:, None], idx[None, :]]


# --------------------------------------------------------------------------
# trajectories and datasets
# --------------------------------------------------------------------------

def default_dictionaries(q1, q2, stage2_input="x2", interactions=False):
    """Intercept plus main effects (and optionally pairwise interactions) per stage.

    The stage-2 dictionary reads ``x2`` alone or the full history
    ``(x1, a1, x2)`` depending on ``stage2_input``.
    """
    names1 = tuple(f"x1_{k + 1}" for k in range(q1))
    names2 = tuple(f"x2_{k + 1}" for k in range(q2))
    d1 = FeatureDictionary.main_effects(q1, 1, interactions=interactions, input_names=names1)
    if stage2_input == "x2":
        d2 = FeatureDictionary.main_effects(q2, 2, interactions=interactions,
                                            input_names=names2)
    elif stage2_input == "history":
        d2 = FeatureDictionary.main_effects(q1 + 1 + q2, 2, interactions=interactions,
                                            input_names=names1 + ("a1",) + names2)
    else:
        raise ConfigurationError("stage2_input must be 'x2' or 'history'")
    return d1, d2


@dataclass(frozen=True)
class Trajectory:
    x1: tuple
    a1: int
    x2: tuple
    a2: int
    y: float

    def __post_init__(self):
        if self.a1 not in (0, 1) or self.a2 not in (0, 1):
            raise ConfigurationError("treatments must be 0 or 1")
        vals = list(self.x1) + list(self.x2) + [self.y]
        if not all(math.isfinite(v) for v in vals):
            raise ConfigurationError("trajectory entries must be finite")


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed trajectories plus the two stage basis matrices.

    Arrays are stored column-wise and flagged read-only. ``history2`` is the
    full stage-2 history ``(x1, a1, x2)``; the stage-2 dictionary is evaluated
    on ``x2`` alone (``stage2_input="x2"``) or on the full history
    (``stage2_input="history"``).
    """

    x1: np.ndarray
    a1: np.ndarray
    x2: np.ndarray
    a2: np.ndarray
    y: np.ndarray
    dict1: FeatureDictionary
    dict2: FeatureDictionary
    stage2_input: str = "x2"
    phi1: np.ndarray = field(init=False, repr=False)
    phi2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        x1 = _readonly(self.x1)
        x2 = _readonly(self.x2)
        if x1.ndim != 2 or x2.ndim != 2:
            raise ConfigurationError("x1 and x2 must be 2-D arrays")
        n = x1.shape[0]
        if n < 2:
            raise ConfigurationError("a dataset needs at least two trajectories")
        cols = {"a1": self.a1, "a2": self.a2, "y": self.y}
        arrs = {}
        for name, v in cols.items():
            v = _readonly(v).ravel()
            if v.shape[0] != n:
                raise ConfigurationError(f"{name} has length {v.shape[0]}, expected {n}")
            arrs[name] = v
        if x2.shape[0] != n:
            raise ConfigurationError("x1 and x2 row counts differ")
        for name in ("a1", "a2"):
            if not np.all((arrs[name] == 0) | (arrs[name] == 1)):
                raise ConfigurationError(f"{name} must be binary 0/1")
        for name, v in (("x1", x1), ("x2", x2), ("y", arrs["y"])):
            if not np.all(np.isfinite(v)):
                raise ConfigurationError(f"{name} contains non-finite values")
        if self.stage2_input not in ("x2", "history"):
            raise ConfigurationError("stage2_input must be 'x2' or 'history'")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)
        for name, v in arrs.items():
            object.__setattr__(self, name, v)
        if self.dict1.stage != 1 or self.dict2.stage != 2:
            raise ConfigurationError("dict1/dict2 must be stage-1/stage-2 dictionaries")
        object.__setattr__(self, "phi1", _readonly(build_basis(x1, self.dict1)))
        object.__setattr__(self, "phi2", _readonly(build_basis(self.stage2_raw, self.dict2)))

    @classmethod
    def from_arrays(cls, x1, a1, x2, a2, y, dict1=None, dict2=None,
                    stage2_input="x2", interactions=False):
        """Build a dataset, defaulting both dictionaries to intercept + main effects."""
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        x2 = np.atleast_2d(np.asarray(x2, dtype=float))
        d1, d2 = default_dictionaries(x1.shape[1], x2.shape[1], stage2_input, interactions)
        return cls(x1, a1, x2, a2, y, dict1 or d1, dict2 or d2, stage2_input)

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], **kwargs):
        x1 = [t.x1 for t in trajectories]
        x2 = [t.x2 for t in trajectories]
        return cls.from_arrays(x1, [t.a1 for t in trajectories], x2,
                               [t.a2 for t in trajectories], [t.y for t in trajectories],
                               **kwargs)

    @property
    def n(self) -> int:
        return self.x1.shape[0]

    @property
    def history2(self) -> np.ndarray:
        """Full stage-2 history ``(x1, a1, x2)``, used by stage-2 nuisances."""
        return np.column_stack([self.x1, self.a1, self.x2])

    @property
    def stage2_raw(self) -> np.ndarray:
        return self.x2 if self.stage2_input == "x2" else self.history2

    @property
    def trajectories(self) -> list[Trajectory]:
        return [
            Trajectory(tuple(self.x1[i]), int(self.a1[i]), tuple(self.x2[i]),
                       int(self.a2[i]), float(self.y[i]))
            for i in range(self.n)
        ]


# --------------------------------------------------------------------------
# folds
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FoldPartition:
    folds: tuple
    n: int

    def __post_init__(self):
        folds = tuple(_readonly_int(f) for f in self.folds)
        object.__setattr__(self, "folds", folds)
        if len(folds) < 2:
            raise ConfigurationError("need at least two folds")
        allidx = np.concatenate(folds)
        if allidx.size != self.n or not np.array_equal(np.sort(allidx), np.arange(self.n)):
            raise ConfigurationError("folds do not partition range(n)")

    @property
    def K(self) -> int:
        return len(self.folds)

    def complement(self, k: int) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.folds[k]] = False
        return np.flatnonzero(mask)

    def __eq__(self, other):
        return (isinstance(other, FoldPartition) and self.n == other.n
                and self.K == other.K
                and all(np.array_equal(a, b) for a, b in zip(self.folds, other.folds)))


def _readonly_int(a):
    a = np.array(a, dtype=np.int64)
    a.setflags(write=False)
    return a


def make_folds(n: int, K: int, seed: int) -> FoldPartition:
    """Random permutation of ``range(n)`` cut into ``K`` contiguous blocks.

    Block sizes differ by at most one; the first ``n % K`` blocks are the
    larger ones. Each fold is returned sorted.
    """
    if K < 2 or K > n:
        raise ConfigurationError(f"need 2 <= K <= n, got K={K}, n={n}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), FOLD_STREAM]))
    perm = rng.permutation(n)
    return FoldPartition(tuple(np.sort(b) for b in np.array_split(perm, K)), n)


# --------------------------------------------------------------------------
# CSV trajectory format
# --------------------------------------------------------------------------

def _expected_header(q1, q2):
    return ([f"x1_{k + 1}" for k in range(q1)] + ["a1"]
            + [f"x2_{k + 1}" for k in range(q2)] + ["a2", "y"])


def read_trajectory_csv(path):
    """Read the trajectory CSV format.

    Returns ``(x1, a1, x2, a2, y)`` arrays. Raises :class:`InputFormatError`
    with a 1-based line number on any malformed row.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputFormatError("empty file: header required", line=1) from None
        q1 = sum(1 for h in header if h.startswith("x1_"))
        q2 = sum(1 for h in header if h.startswith("x2_"))
        expected = _expected_header(q1, q2)
        if header != expected:
            missing = [c for c in expected if c not in header] or [
                c for c in ("a1", "a2", "y") if c not in header]
            col = missing[0] if missing else None
            raise InputFormatError(
                f"line 1: header {header} does not match expected layout {expected}"
                + (f" (missing column {col!r})" if col else ""),
                line=1, column=col)
        if q1 == 0 or q2 == 0:
            raise InputFormatError("line 1: need at least one x1_ and one x2_ column", line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputFormatError(
                    f"line {lineno}: expected {len(header)} fields, found {len(row)}",
                    line=lineno, column=header[min(len(row), len(header) - 1)])
            vals = []
            for name, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise InputFormatError(
                        f"line {lineno}, column {name!r}: cannot parse {cell!r} as a number",
                        line=lineno, column=name) from None
                if not math.isfinite(v):
                    raise InputFormatError(
                        f"line {lineno}, column {name!r}: non-finite value",
                        line=lineno, column=name)
                if name in ("a1", "a2") and v not in (0.0, 1.0):
                    raise InputFormatError(
                        f"line {lineno}, column {name!r}: treatment must be 0 or 1",
                        line=lineno, column=name)
                vals.append(v)
            rows.append(vals)
    if len(rows) < 2:
        raise InputFormatError("need at least two data rows", line=len(rows) + 1)
    M = np.asarray(rows)
    x1 = M[:, :q1]
    a1 = M[:, q1]
    x2 = M[:, q1 + 1:q1 + 1 + q2]
    return x1, a1, x2, M[:, -2], M[:, -1]


def write_trajectory_csv(path, dataset: Dataset):
    q1, q2 = dataset.x1.shape[1], dataset.x2.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_expected_header(q1, q2))
        for i in range(dataset.n):
            w.writerow([repr(float(v)) for v in dataset.x1[i]]
                       + [int(dataset.a1[i])]
                       + [repr(float(v)) for v in dataset.x2[i]]
                       + [int(dataset.a2[i]), repr(float(dataset.y[i]))])
