"""Core data types and probability primitives for weakly supervised clustering.

A :class:`Dataset` is a collection of groups. Each group carries one coarse
logit-scale signal ``he`` and a list of items, each item falling in one of
``K`` behavior bins (1-based) with a positive weight.

Estimators never iterate over items one at a time. They work on the
compressed ``(group, bin)`` cell view returned by :meth:`Dataset.cells`,
where every item sharing a group and a bin is merged into one weighted cell.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

METHODS = ("naive", "mom", "em", "oracle")


def sigmoid(x):
    """Logistic function, stable for large ``|x|``.

    Works on scalars and arrays. Positive and negative arguments take
    separate branches so ``exp`` never overflows.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def logit(p, eps: float = 1e-6):
    """Inverse of :func:`sigmoid`, with ``p`` clamped to ``[eps, 1 - eps]``."""
    p = np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)
    out = np.log(p) - np.log1p(-p)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class BehaviorBinning:
    """Labelled set of ``K`` behavior buckets.

    Bins are usually the cross product of a few categorical factors;
    ``factor_levels`` lists their cardinalities in row-major order.
    """

    n_bins: int
    factor_levels: tuple = ()
    labels: tuple = ()

    def __post_init__(self):
        if not self.factor_levels:
            object.__setattr__(self, "factor_levels", (self.n_bins,))
        if not self.labels:
            object.__setattr__(
                self, "labels", tuple(f"bin{k}" for k in range(1, self.n_bins + 1))
            )
        object.__setattr__(self, "factor_levels", tuple(int(v) for v in self.factor_levels))
        object.__setattr__(self, "labels", tuple(str(v) for v in self.labels))
        if self.n_bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.n_bins}")
        if math.prod(self.factor_levels) != self.n_bins:
            raise ValueError(
                f"factor levels {self.factor_levels} do not multiply to {self.n_bins}"
            )
        if len(self.labels) != self.n_bins:
            raise ValueError(f"expected {self.n_bins} labels, got {len(self.labels)}")
        if len(set(self.labels)) != self.n_bins:
            raise ValueError("bin labels must be distinct")

    @classmethod
    def from_factors(cls, factors: Sequence[Sequence[str]], sep: str = ":") -> "BehaviorBinning":
        """Cross the given factor levels, last factor varying fastest."""
        levels = [list(f) for f in factors]
        labels = tuple(sep.join(combo) for combo in itertools.product(*levels))
        return cls(len(labels), tuple(len(f) for f in levels), labels)

    @property
    def K(self) -> int:
        return self.n_bins


@dataclass(frozen=True)
class GroupObservations:
    """One group: its coarse signal and the bins (1..K) and weights of its items."""

    group_id: str
    he: float
    bins: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.int64).reshape(-1)
        if self.weights is None:
            weights = np.ones(bins.shape[0])
        else:
            weights = np.asarray(self.weights, dtype=float).reshape(-1)
        object.__setattr__(self, "group_id", str(self.group_id))
        object.__setattr__(self, "he", float(self.he))
        object.__setattr__(self, "bins", bins)
        object.__setattr__(self, "weights", weights)

    @property
    def items(self) -> list:
        return list(zip(self.bins.tolist(), self.weights.tolist()))

    @property
    def n_items(self) -> int:
        return int(self.bins.shape[0])

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


class Cells(NamedTuple):
    """Items merged by ``(group, bin)``; the layout every estimator runs on."""

    group: np.ndarray  # group index per cell, nondecreasing
    bin: np.ndarray  # 0-based bin per cell
    weight: np.ndarray  # summed item weight per cell
    n_groups: int
    n_bins: int


@dataclass(frozen=True)
class Dataset:
    binning: BehaviorBinning
    groups: tuple
    item_labels: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.item_labels is not None:
            object.__setattr__(
                self,
                "item_labels",
                tuple(np.asarray(lab, dtype=float).reshape(-1) for lab in self.item_labels),
            )

    @property
    def K(self) -> int:
        return self.binning.n_bins

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @cached_property
    def n_items(self) -> int:
        return sum(g.n_items for g in self.groups)

    @cached_property
    def group_ids(self) -> tuple:
        return tuple(g.group_id for g in self.groups)

    @cached_property
    def he(self) -> np.ndarray:
        return np.array([g.he for g in self.groups], dtype=float)

    @cached_property
    def group_index(self) -> np.ndarray:
        """Group index of every item, in flat item order."""
        sizes = [g.n_items for g in self.groups]
        return np.repeat(np.arange(len(sizes)), sizes)

    @cached_property
    def bins(self) -> np.ndarray:
        """Flat 1-based bin index of every item."""
        if not self.groups:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([g.bins for g in self.groups])

    @cached_property
    def weights(self) -> np.ndarray:
        if not self.groups:
            return np.zeros(0)
        return np.concatenate([g.weights for g in self.groups])

    @cached_property
    def labels(self) -> Optional[np.ndarray]:
        """Flat per-item labels, or None when the dataset is unlabelled."""
        if self.item_labels is None:
            return None
        if not self.item_labels:
            return np.zeros(0)
        return np.concatenate(self.item_labels)

    def cells(self) -> Cells:
        return self._cells

    @cached_property
    def _cells(self) -> Cells:
        K = self.K
        key = self.group_index * K + (self.bins - 1)
        if self.n_groups * K <= 4 * key.size + 65536:
            weight = np.bincount(key, weights=self.weights)
            keys = np.flatnonzero(np.bincount(key) > 0)
            weight = weight[keys]
        else:
            # sparse layout: I*K would dwarf the item count
            keys, inverse = np.unique(key, return_inverse=True)
            weight = np.bincount(inverse, weights=self.weights, minlength=keys.size)
        return Cells(keys // K, keys % K, weight, self.n_groups, K)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        """Dataset restricted to the groups at ``indices`` (order kept as given)."""
        indices = [int(i) for i in indices]
        labels = None
        if self.item_labels is not None:
            labels = tuple(self.item_labels[i] for i in indices)
        return Dataset(self.binning, tuple(self.groups[i] for i in indices), labels)

    def with_groups(self, groups: Sequence[GroupObservations]) -> "Dataset":
        return Dataset(self.binning, tuple(groups), self.item_labels)


@dataclass(frozen=True)
class ModelParams:
    """Class-conditional bin distributions ``w0``, ``w1`` and prior ``pi``."""

    w0: np.ndarray
    w1: np.ndarray
    pi: float

    def __post_init__(self):
        w0 = np.asarray(self.w0, dtype=float)
        w1 = np.asarray(self.w1, dtype=float)
        if w0.shape != w1.shape or w0.ndim != 1:
            raise ValueError("w0 and w1 must be 1-d vectors of the same length")
        for name, w in (("w0", w0), ("w1", w1)):
            if np.any(w <= 0):
                raise ValueError(f"{name} must be strictly positive")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} must sum to 1, sums to {w.sum()!r}")
        if not 0.0 < self.pi < 1.0:
            raise ValueError(f"pi must lie in (0, 1), got {self.pi}")
        object.__setattr__(self, "w0", w0)
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "pi", float(self.pi))


@dataclass(frozen=True)
class PosteriorEstimate:
    """Per-bin posterior probability of the positive class.

    ``rho`` of a method-of-moments fit may leave ``[0, 1]``; use
    :attr:`in_unit_interval` to see which bins did.
    """

    rho: np.ndarray
    method: str
    se: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float))
        if self.se is not None:
            object.__setattr__(self, "se", np.asarray(self.se, dtype=float))

    @property
    def in_unit_interval(self) -> np.ndarray:
        return (self.rho >= 0.0) & (self.rho <= 1.0)

    def with_se(self, se) -> "PosteriorEstimate":
        return PosteriorEstimate(self.rho, self.method, np.asarray(se, dtype=float))


@dataclass
class LatentState:
    """Current EM iterate.

    ``z`` is stored per ``(group, bin)`` cell; :meth:`item_z` expands it back
    to the ragged per-item layout.
    """

    mu: np.ndarray
    z: np.ndarray
    w0: np.ndarray
    w1: np.ndarray
    objective_trace: list = field(default_factory=list)

    def item_z(self, dataset: Dataset) -> list:
        cells = dataset.cells()
        lookup = np.full(cells.n_groups * cells.n_bins, np.nan)
        lookup[cells.group * cells.n_bins + cells.bin] = self.z
        flat = lookup[dataset.group_index * cells.n_bins + dataset.bins - 1]
        return np.split(flat, np.cumsum([g.n_items for g in dataset.groups])[:-1])


def posterior_rho(params: ModelParams) -> PosteriorEstimate:
    """Bayes' rule: probability of the positive class given each bin."""
    num = params.pi * params.w1
    rho = num / ((1.0 - params.pi) * params.w0 + num)
    return PosteriorEstimate(rho, "oracle")


def _mixture_terms(cells: Cells, mu, w0, w1) -> np.ndarray:
    s = sigmoid(np.asarray(mu, dtype=float))
    if s.ndim == 0:
        s = np.atleast_1d(s)
    sg = s[cells.group]
    return (1.0 - sg) * w0[cells.bin] + sg * w1[cells.bin]


def penalized_loglik(dataset: Dataset, state: LatentState, wh: float) -> float:
    """Weighted marginal log-likelihood minus the quadratic pull toward ``he``.

    Returns ``-inf`` (with a warning) when some mixture probability
    underflows to zero. With ``wh = inf`` the penalty is taken as zero; the
    caller is responsible for keeping ``mu == he`` in that case.
    """
    cells = dataset.cells()
    if cells.weight.size == 0:
        data = 0.0
    else:
        mix = _mixture_terms(cells, state.mu, np.asarray(state.w0), np.asarray(state.w1))
        if np.any(mix <= 0.0):
            import warnings

            warnings.warn("mixture probability underflowed to 0", RuntimeWarning)
            return -math.inf
        data = float(np.dot(cells.weight, np.log(mix)))
    if math.isinf(wh) or wh == 0.0 or dataset.n_groups == 0:
        return data
    diff = np.asarray(state.mu, dtype=float) - dataset.he
    return data - wh * float(np.dot(diff, diff)) / 2.0


def smoothing_term(w0, w1) -> float:
    """Log-density of the symmetric Dirichlet(2) prior that the +1 pseudo-counts imply."""
    return float(np.sum(np.log(w0)) + np.sum(np.log(w1)))


def smoothed_objective(dataset: Dataset, state: LatentState, wh: float) -> float:
    """The quantity EM with pseudo-counts actually ascends."""
    return penalized_loglik(dataset, state, wh) + smoothing_term(state.w0, state.w1)


@dataclass(frozen=True)
class Violation:
    group_id: Optional[str]
    field: str
    message: str

    def __str__(self):
        where = "dataset" if self.group_id is None else f"group {self.group_id!r}"
        return f"{where}: {self.field}: {self.message}"


def validate_dataset(dataset: Dataset) -> list:
    """List every broken invariant of ``dataset``; empty means valid."""
    out = []
    K = dataset.K
    seen = set()
    for i, g in enumerate(dataset.groups):
        if g.group_id in seen:
            out.append(Violation(g.group_id, "group_id", "duplicate group id"))
        seen.add(g.group_id)
        if math.isnan(g.he):
            out.append(Violation(g.group_id, "he", "signal is NaN"))
        if g.bins.shape != g.weights.shape:
            out.append(Violation(g.group_id, "items", "bins and weights differ in length"))
            continue
        bad = (g.bins < 1) | (g.bins > K)
        if bad.any():
            out.append(
                Violation(
                    g.group_id,
                    "bin_index",
                    f"{int(bad.sum())} bin indices outside [1, {K}], e.g. {int(g.bins[bad][0])}",
                )
            )
        badw = ~((g.weights > 0) & (g.weights <= 1))
        if badw.any():
            out.append(
                Violation(
                    g.group_id,
                    "weight",
                    f"{int(badw.sum())} weights outside (0, 1], e.g. {float(g.weights[badw][0])}",
                )
            )
    if dataset.item_labels is not None:
        if len(dataset.item_labels) != dataset.n_groups:
            out.append(
                Violation(None, "item_labels", "one label array per group is required")
            )
        else:
            for g, lab in zip(dataset.groups, dataset.item_labels):
                if lab.shape != g.bins.shape:
                    out.append(
                        Violation(g.group_id, "item_labels", "labels do not match items")
                    )
                elif np.any((lab != 0) & (lab != 1)):
                    out.append(Violation(g.group_id, "item_labels", "labels must be 0 or 1"))
    return out


class InvalidDatasetError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        shown = "; ".join(str(v) for v in self.violations[:5])
        more = len(self.violations) - 5
        if more > 0:
            shown += f"; ... {more} more"
        super().__init__(f"invalid dataset: {shown}")


def check_dataset(dataset) -> Dataset:
    """Raise :class:`InvalidDatasetError` unless ``dataset`` is a valid Dataset."""
    if not isinstance(dataset, Dataset):
        raise TypeError(f"expected a Dataset, got {type(dataset).__name__}")
    violations = validate_dataset(dataset)
    if violations:
        raise InvalidDatasetError(violations)
    return dataset


def make_dataset(K, groups, he=None, bins=None, weights=None, labels=None) -> Dataset:
    """Build a Dataset from flat per-item arrays.

    ``groups`` gives the group id of every item (items of one group need
    not be contiguous); ``he`` maps group id to signal, either as a dict or
    as an array aligned with the sorted unique ids.
    """
    groups = np.asarray(groups)
    bins = np.asarray(bins, dtype=np.int64)
    weights = np.ones(bins.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    ids, inverse = np.unique(groups, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    splits = np.cumsum(np.bincount(inverse, minlength=len(ids)))[:-1]
    if isinstance(he, dict):
        he_values = [he[g] for g in ids.tolist()]
    else:
        he_values = np.asarray(he, dtype=float).tolist()
    per_bins = np.split(bins[order], splits)
    per_w = np.split(weights[order], splits)
    out = [
        GroupObservations(str(gid), h, b, w)
        for gid, h, b, w in zip(ids.tolist(), he_values, per_bins, per_w)
    ]
    item_labels = None
    if labels is not None:
        item_labels = tuple(np.split(np.asarray(labels, dtype=float)[order], splits))
    binning = K if isinstance(K, BehaviorBinning) else BehaviorBinning(int(K))
    return Dataset(binning, tuple(out), item_labels)
