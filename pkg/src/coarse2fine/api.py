"""scikit-learn style estimators over the functional fitting routines.

Each estimator accepts either a :class:`~coarse2fine.model.Dataset` or the
flat sklearn layout: ``X`` holds one bin index (1..K) per item, ``y`` the
coarse signal of the item's group repeated on every row, and ``groups``
the group id of every row::

    est = LatentClassEstimator(wh=10).fit(X, y, groups=groups)
    est.predict_proba(X)[:, 1]
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .analysis import oracle_fit
from .em import FitConfig, em_fit
from .estimators import mom_fit, naive_fit
from .model import Dataset, check_dataset, make_dataset


def as_dataset(X, y=None, groups=None, sample_weight=None, n_bins=None, labels=None) -> Dataset:
    """Coerce sklearn-style arrays (or a Dataset) into a validated Dataset."""
    if isinstance(X, Dataset):
        return check_dataset(X)
    bins = _check_bins(X)
    if y is None or groups is None:
        raise ValueError("array input needs y (per-row group signal) and groups")
    y = np.asarray(y, dtype=float).reshape(-1)
    groups = np.asarray(groups)
    if y.shape[0] != bins.shape[0] or groups.shape[0] != bins.shape[0]:
        raise ValueError("X, y and groups must have the same number of rows")
    ids, first, inverse = np.unique(groups, return_index=True, return_inverse=True)
    he = y[first]
    if not np.array_equal(he[inverse], y):
        raise ValueError("y must be constant within each group")
    K = int(n_bins) if n_bins is not None else int(bins.max(initial=1))
    K = max(K, 2)
    ds = make_dataset(K, groups, he, bins, sample_weight, labels)
    return check_dataset(ds)


def _check_bins(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError(f"X must have a single bin column, got shape {X.shape}")
        X = X[:, 0]
    if X.ndim != 1:
        raise ValueError("X must be a 1-d array of bin indices")
    if X.size and not np.all(np.equal(np.mod(X, 1), 0)):
        raise ValueError("bin indices must be integers")
    return X.astype(np.int64)


class _PosteriorEstimator(ClassifierMixin, BaseEstimator):
    """Shared predict/transform surface; subclasses set ``rho_`` in ``fit``."""

    def _fit_dataset(self, dataset):
        raise NotImplementedError

    def fit(self, X, y=None, groups=None, sample_weight=None):
        n_bins = getattr(self, "n_bins", None)
        dataset = as_dataset(X, y, groups, sample_weight, n_bins)
        estimate = self._fit_dataset(dataset)
        self.estimate_ = estimate
        self.rho_ = estimate.rho
        self.n_bins_ = dataset.K
        self.classes_ = np.array([0, 1])
        return self

    def _bins_of(self, X):
        check_is_fitted(self, "rho_")
        if isinstance(X, Dataset):
            bins = X.bins
        else:
            bins = _check_bins(X)
        if bins.size and (bins.min() < 1 or bins.max() > self.n_bins_):
            raise ValueError(f"bin indices must lie in [1, {self.n_bins_}]")
        return bins

    def transform(self, X):
        """Per-item positive-class probability, clamped to [0, 1]."""
        bins = self._bins_of(X)
        return np.clip(self.rho_[bins - 1], 0.0, 1.0)

    def predict_proba(self, X):
        p = self.transform(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.transform(X) > 0.5).astype(int)


class NaiveEstimator(_PosteriorEstimator):
    """Every item inherits its group's ``sigmoid(signal)`` as a soft label."""

    def __init__(self, n_bins=None):
        self.n_bins = n_bins

    def _fit_dataset(self, dataset):
        return naive_fit(dataset)


class MomentsEstimator(_PosteriorEstimator):
    """Least-squares method of moments; ``rho_`` may leave [0, 1]."""

    def __init__(self, n_bins=None, rcond=1e-10):
        self.n_bins = n_bins
        self.rcond = rcond

    def _fit_dataset(self, dataset):
        return mom_fit(dataset, rcond=self.rcond)


class LatentClassEstimator(_PosteriorEstimator):
    """Latent variables model fitted by EM.

    Fitted attributes besides ``rho_``: ``mu_`` (per-group quality on the
    logit scale), ``w0_``, ``w1_``, ``n_iter_``, ``converged_`` and
    ``objective_trace_``.
    """

    def __init__(
        self,
        wh=10.0,
        max_iters=500,
        tol=1e-8,
        mu_clamp=30.0,
        newton_tol=1e-10,
        newton_max_iters=100,
        n_bins=None,
    ):
        self.wh = wh
        self.max_iters = max_iters
        self.tol = tol
        self.mu_clamp = mu_clamp
        self.newton_tol = newton_tol
        self.newton_max_iters = newton_max_iters
        self.n_bins = n_bins

    def fit_config(self) -> FitConfig:
        return FitConfig(
            wh=self.wh,
            max_iters=self.max_iters,
            tol=self.tol,
            mu_clamp=self.mu_clamp,
            newton_tol=self.newton_tol,
            newton_max_iters=self.newton_max_iters,
        )

    def _fit_dataset(self, dataset):
        result = em_fit(dataset, self.fit_config())
        self.result_ = result
        self.mu_ = result.state.mu
        self.w0_ = result.state.w0
        self.w1_ = result.state.w1
        self.n_iter_ = result.iterations
        self.converged_ = result.converged
        self.objective_trace_ = np.asarray(result.state.objective_trace)
        self.group_ids_ = dataset.group_ids
        return result.estimate


class OracleEstimator(_PosteriorEstimator):
    """Upper-bound baseline trained on true item labels."""

    def __init__(self, n_bins=None):
        self.n_bins = n_bins

    def fit(self, X, y=None, groups=None, sample_weight=None):
        if not isinstance(X, Dataset):
            # labels come in through y here, one per item; groups are irrelevant
            bins = _check_bins(X)
            labels = np.asarray(y, dtype=float).reshape(-1)
            rows = np.arange(bins.shape[0]) if groups is None else groups
            K = self.n_bins if self.n_bins is not None else max(int(bins.max(initial=1)), 2)
            X = make_dataset(K, rows, np.zeros(len(np.unique(rows))), bins, sample_weight, labels)
        return super().fit(X)

    def _fit_dataset(self, dataset):
        return oracle_fit(dataset)


__all__ = [
    "LatentClassEstimator",
    "MomentsEstimator",
    "NaiveEstimator",
    "NotFittedError",
    "OracleEstimator",
    "as_dataset",
]
