"""Convex baselines: direct hard assignment and the method of moments."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import Cells, Dataset, PosteriorEstimate, check_dataset, sigmoid

logger = logging.getLogger(__name__)


class RankDeficientError(np.linalg.LinAlgError):
    """The behavior-frequency matrix does not determine every bin."""

    def __init__(self, rank, n_bins, condition_number):
        self.rank = rank
        self.n_bins = n_bins
        self.condition_number = condition_number
        super().__init__(
            f"behavior-frequency matrix has numerical rank {rank} < {n_bins} bins "
            f"(condition number {condition_number:.3g})"
        )


def rho_from_z(cells: Cells, z) -> np.ndarray:
    """Pseudo-count posterior per bin from per-cell positive-class weights.

    ``(1 + sum weight*z) / (2 + sum weight)`` over the cells of each bin.
    Shared by the naive estimator, the oracle and the EM final answer.
    """
    pos = np.bincount(cells.bin, weights=cells.weight * z, minlength=cells.n_bins)
    tot = np.bincount(cells.bin, weights=cells.weight, minlength=cells.n_bins)
    return (1.0 + pos) / (2.0 + tot)


def naive_fit(dataset: Dataset) -> PosteriorEstimate:
    """Direct estimate: every item inherits its group's ``sigmoid(he)``."""
    check_dataset(dataset)
    cells = dataset.cells()
    s = sigmoid(dataset.he) if dataset.n_groups else np.zeros(0)
    return PosteriorEstimate(rho_from_z(cells, s[cells.group]), "naive")


@dataclass(frozen=True)
class OmegaMatrix:
    """Weighted empirical bin distribution of each non-empty group."""

    rows: np.ndarray
    group_ids: tuple
    condition_number: float
    dropped: tuple = ()


def build_omega(dataset: Dataset) -> OmegaMatrix:
    check_dataset(dataset)
    return _omega(dataset)[0]


def _omega(dataset):
    cells = dataset.cells()
    totals = np.bincount(cells.group, weights=cells.weight, minlength=dataset.n_groups)
    keep = totals > 0
    dropped = tuple(gid for gid, k in zip(dataset.group_ids, keep) if not k)
    if dropped:
        logger.warning("dropping %d groups with no items from the moment matrix", len(dropped))
    rows = np.zeros((dataset.n_groups, dataset.K))
    rows[cells.group, cells.bin] = cells.weight / totals[cells.group]
    rows = rows[keep]
    kept_ids = tuple(gid for gid, k in zip(dataset.group_ids, keep) if k)
    if rows.shape[0]:
        sv = np.linalg.svd(rows, compute_uv=False)
        cond = float(sv[0] / sv[-1]) ** 2 if sv[-1] > 0 and rows.shape[0] >= rows.shape[1] else np.inf
    else:
        cond = np.inf
    return OmegaMatrix(rows, kept_ids, cond, dropped), keep


def mom_fit(dataset: Dataset, rcond: float = 1e-10) -> PosteriorEstimate:
    """Least-squares fit of ``sigmoid(he) ~ omega @ rho``.

    The estimate is deliberately left unclamped. Raises
    :class:`RankDeficientError` when the frequency matrix has numerical rank
    below ``K`` at ``rcond`` times the largest singular value.
    """
    check_dataset(dataset)
    omega, keep = _omega(dataset)
    K = dataset.K
    if omega.rows.shape[0] < K:
        logger.warning(
            "only %d non-empty groups for %d bins; moment fit is underdetermined",
            omega.rows.shape[0],
            K,
        )
    if omega.rows.shape[0] == 0:
        raise RankDeficientError(0, K, np.inf)
    target = sigmoid(dataset.he[keep])
    rho, _, rank, sv = np.linalg.lstsq(omega.rows, target, rcond=rcond)
    if rank < K:
        raise RankDeficientError(int(rank), K, omega.condition_number)
    out = PosteriorEstimate(rho, "mom")
    if not out.in_unit_interval.all():
        logger.info(
            "method-of-moments estimate leaves [0, 1] in bins %s",
            (np.flatnonzero(~out.in_unit_interval) + 1).tolist(),
        )
    return out
