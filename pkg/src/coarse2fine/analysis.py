"""Standard errors by grouped half-sampling, cross-validation and baselines."""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .em import FitConfig, em_fit
from .estimators import mom_fit, naive_fit
from .model import Dataset, GroupObservations, PosteriorEstimate, check_dataset

logger = logging.getLogger(__name__)

THREADS_ENV = "COARSE2FINE_THREADS"


def n_workers(requested: int | None = None) -> int:
    """Worker count from the argument or ``COARSE2FINE_THREADS`` (0 = auto)."""
    if requested is None:
        requested = int(os.environ.get(THREADS_ENV, "0") or 0)
    if requested <= 0:
        requested = os.cpu_count() or 1
    return max(1, requested)


def _run_jobs(fn, jobs, workers):
    # results are returned in job order whatever the worker count
    if workers == 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def downweight(dataset: Dataset, cap_m: float = 500.0) -> Dataset:
    """Shrink item weights so no group's total weight exceeds ``cap_m``."""
    if not cap_m > 0:
        raise ValueError(f"cap_m must be positive, got {cap_m}")
    groups = []
    for g in dataset.groups:
        total = g.total_weight
        if total > cap_m:
            g = GroupObservations(g.group_id, g.he, g.bins, g.weights * (cap_m / total))
        groups.append(g)
    return dataset.with_groups(groups)


def oracle_fit(dataset: Dataset) -> PosteriorEstimate:
    """Direct estimate using each item's true label in place of its group's signal."""
    check_dataset(dataset)
    if dataset.labels is None:
        raise ValueError("oracle_fit needs item labels")
    K = dataset.K
    b = dataset.bins - 1
    pos = np.bincount(b, weights=dataset.weights * dataset.labels, minlength=K)
    tot = np.bincount(b, weights=dataset.weights, minlength=K)
    return PosteriorEstimate((1.0 + pos) / (2.0 + tot), "oracle")


def singleton_groups(dataset: Dataset) -> Dataset:
    """One group per labelled item, with signal ``+-inf`` according to the label.

    ``sigmoid(+-inf)`` is exactly the label, so :func:`naive_fit` on the
    result reproduces :func:`oracle_fit`.
    """
    if dataset.labels is None:
        raise ValueError("singleton transform needs item labels")
    groups = []
    labels = []
    n = 0
    for g, lab in zip(dataset.groups, dataset.item_labels):
        for b, w, y in zip(g.bins, g.weights, lab):
            he = np.inf if y == 1 else -np.inf
            groups.append(GroupObservations(f"{g.group_id}/{n}", he, [b], [w]))
            labels.append(np.array([y]))
            n += 1
    return Dataset(dataset.binning, tuple(groups), tuple(labels))


def predict_items(estimate: PosteriorEstimate, dataset: Dataset) -> np.ndarray:
    """Per-item probability ``rho[bin]`` in flat item order, clamped to [0, 1]."""
    rho = np.asarray(estimate.rho, dtype=float)
    if rho.shape != (dataset.K,):
        raise ValueError(f"estimate has {rho.size} bins, dataset has {dataset.K}")
    return np.clip(rho[dataset.bins - 1], 0.0, 1.0)


@dataclass
class SubsampleSpec:
    n_replicates: int = 100
    seed: int = 0
    fraction: float = 0.5

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be positive")
        if self.fraction != 0.5:
            raise ValueError("only half-sampling (fraction = 1/2) is supported")


class SubsampleError(RuntimeError):
    pass


def _rho_of(result) -> np.ndarray:
    if isinstance(result, PosteriorEstimate):
        return result.rho
    if hasattr(result, "estimate"):
        return result.estimate.rho
    return np.asarray(result, dtype=float)


def half_sample_indices(dataset: Dataset, seed: int, replicate: int) -> np.ndarray:
    """Group positions for one half-sample, defined over sorted group ids."""
    order = np.argsort(np.asarray(dataset.group_ids, dtype=object), kind="stable")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate)]))
    pick = rng.choice(dataset.n_groups, size=dataset.n_groups // 2, replace=False)
    return order[np.sort(pick)]


def subsample_replicates(
    dataset: Dataset,
    fitter: Callable,
    spec: SubsampleSpec | None = None,
    workers: int | None = None,
) -> np.ndarray:
    """Refit on random halves of the groups; one row of estimates per replicate that succeeded."""
    spec = spec or SubsampleSpec()
    if dataset.n_groups < 4:
        raise ValueError("half-sampling needs at least 4 groups")

    def one(r):
        sub = dataset.subset(half_sample_indices(dataset, spec.seed, r))
        try:
            return _rho_of(fitter(sub))
        except Exception as exc:  # noqa: BLE001 - any fitter failure drops the replicate
            return exc

    results = _run_jobs(one, list(range(spec.n_replicates)), n_workers(workers))
    good = []
    for r, res in enumerate(results):
        if isinstance(res, Exception):
            warnings.warn(f"replicate {r} failed: {res}", RuntimeWarning)
        else:
            good.append(res)
    if len(good) < 0.8 * spec.n_replicates:
        raise SubsampleError(
            f"only {len(good)} of {spec.n_replicates} half-sample fits succeeded"
        )
    return np.vstack(good)


def subsample_se(
    dataset: Dataset,
    fitter: Callable,
    spec: SubsampleSpec | None = None,
    workers: int | None = None,
) -> np.ndarray:
    """Standard deviation of the per-bin estimates across half-samples.

    The raw spread across halves is reported as is, without rescaling to
    the full sample size.
    """
    reps = subsample_replicates(dataset, fitter, spec, workers)
    if reps.shape[0] < 2:
        return np.zeros(reps.shape[1])
    # shifting by one replicate keeps identical estimates at exactly zero spread
    return (reps - reps[0]).std(axis=0, ddof=1)


def latent_fitter(config: FitConfig | None = None) -> Callable:
    config = config or FitConfig()
    return lambda ds: em_fit(ds, config).estimate


FITTERS = {
    "naive": lambda config: naive_fit,
    "direct": lambda config: naive_fit,
    "mom": lambda config: mom_fit,
    "em": latent_fitter,
    "latent": latent_fitter,
    "oracle": lambda config: oracle_fit,
}


@dataclass
class EvalRow:
    method: str
    mean_classification_error: float
    rmse: float
    failed_splits: int = 0


@dataclass
class EvalReport:
    rows: list
    n_splits: int
    split_seed: int
    per_split: dict = field(default_factory=dict)

    def row(self, method: str) -> EvalRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


def _scores(pred, labels, weights):
    err = np.where(pred > 0.5, 1.0, 0.0) != labels
    tot = weights.sum()
    ce = float(np.dot(weights, err) / tot)
    rmse = float(np.sqrt(np.dot(weights, (pred - labels) ** 2) / tot))
    return ce, rmse


def cv_split(dataset: Dataset, seed: int, split: int):
    """Disjoint (train, test) group positions covering every group."""
    order = np.argsort(np.asarray(dataset.group_ids, dtype=object), kind="stable")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(split), 1]))
    perm = order[rng.permutation(dataset.n_groups)]
    half = dataset.n_groups // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def cross_validate(
    dataset: Dataset,
    methods: Sequence[str] = ("null", "direct", "latent", "oracle"),
    n_splits: int = 20,
    seed: int = 0,
    config: FitConfig | None = None,
    workers: int | None = None,
) -> EvalReport:
    """Train on a random half of the groups, score item predictions on the other half.

    ``null`` predicts the training items' weighted positive rate for every
    test item. Classification uses a fixed 0.5 threshold.
    """
    check_dataset(dataset)
    if dataset.labels is None:
        raise ValueError("cross-validation needs item labels")
    if dataset.n_groups < 2:
        raise ValueError("cross-validation needs at least 2 groups")
    for m in methods:
        if m != "null" and m not in FITTERS:
            raise ValueError(f"unknown method {m!r}")

    def one(s):
        train_idx, test_idx = cv_split(dataset, seed, s)
        train, test = dataset.subset(train_idx), dataset.subset(test_idx)
        out = {}
        for m in methods:
            try:
                if m == "null":
                    rate = float(np.dot(train.weights, train.labels) / train.weights.sum())
                    pred = np.full(test.n_items, rate)
                else:
                    pred = predict_items(_as_estimate(FITTERS[m](config)(train)), test)
                out[m] = _scores(pred, test.labels, test.weights)
            except Exception as exc:  # noqa: BLE001 - a failing method is reported, not fatal
                logger.warning("method %s failed on split %d: %s", m, s, exc)
                out[m] = None
        return out

    splits = _run_jobs(one, list(range(n_splits)), n_workers(workers))
    rows = []
    per_split = {}
    for m in methods:
        vals = [s[m] for s in splits if s[m] is not None]
        per_split[m] = [s[m] for s in splits]
        failed = n_splits - len(vals)
        if vals:
            arr = np.array(vals)
            rows.append(EvalRow(m, float(arr[:, 0].mean()), float(arr[:, 1].mean()), failed))
        else:
            rows.append(EvalRow(m, float("nan"), float("nan"), failed))
    return EvalReport(rows, n_splits, seed, per_split)


def _as_estimate(result) -> PosteriorEstimate:
    if isinstance(result, PosteriorEstimate):
        return result
    return result.estimate


__all__ = [
    "EvalReport",
    "EvalRow",
    "SubsampleSpec",
    "cross_validate",
    "downweight",
    "oracle_fit",
    "predict_items",
    "singleton_groups",
    "subsample_se",
]
