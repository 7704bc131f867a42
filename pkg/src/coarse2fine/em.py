"""EM fitting of the latent variables model.

Each group ``i`` has an unknown quality ``mu_i`` observed through a noisy
signal ``he_i``; each item is positive with probability ``sigmoid(mu_i)``
and its bin is drawn from ``w1`` or ``w0`` accordingly. EM alternates

* E-step: posterior positive-class probability ``z`` for every item,
* M-step: pseudo-count update of ``w0``/``w1`` and a per-group root solve
  for ``mu``,

and the final answer is the pseudo-count average of ``z`` within each bin.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import rho_from_z
from .model import (
    Cells,
    Dataset,
    GroupObservations,
    LatentState,
    PosteriorEstimate,
    check_dataset,
    sigmoid,
    smoothing_term,
)

logger = logging.getLogger(__name__)


class NewtonError(ArithmeticError):
    """The safeguarded Newton solve for ``mu`` did not reach its tolerance."""

    def __init__(self, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"mu solve did not converge in {iterations} iterations (residual {residual:.3g})"
        )


class DivergenceError(ArithmeticError):
    """EM produced a mixture probability of exactly zero."""


@dataclass
class FitConfig:
    """Fitting options for :func:`em_fit`.

    ``wh`` is the weight on the coarse signal, ``1 / sigma_h**2``; ``inf``
    pins every ``mu`` to its signal, ``0`` uses the signal only to start.
    """

    wh: float = 10.0
    max_iters: int = 500
    tol: float = 1e-8
    mu_clamp: float = 30.0
    newton_tol: float = 1e-10
    newton_max_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        self.wh = float(self.wh)
        if not self.wh >= 0:
            raise ValueError(f"wh must be nonnegative, got {self.wh}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.mu_clamp >= 10:
            raise ValueError("mu_clamp must be at least 10")
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.newton_max_iters < 1:
            raise ValueError("newton_max_iters must be positive")


@dataclass
class EmResult:
    estimate: PosteriorEstimate
    state: LatentState
    iterations: int
    converged: bool
    clamped_groups: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def solve_mu(he, total_weight, pos_weight, wh, mu_clamp=30.0, tol=1e-10, max_iters=100, start=None):
    """Vectorised safeguarded Newton for the ``mu`` M-step of every group.

    Solves ``wh*(mu - he) + total_weight*sigmoid(mu) - pos_weight = 0``
    elementwise. The left side is strictly increasing, so a sign-changing
    bracket inside ``[-mu_clamp, mu_clamp]`` always exists unless the root
    lies beyond the clamp, in which case the clamp value is returned.

    Returns ``(mu, clamped)``.
    """
    he = np.asarray(he, dtype=float)
    W = np.asarray(total_weight, dtype=float)
    S = np.asarray(pos_weight, dtype=float)
    n = he.shape[0]
    if math.isinf(wh):
        return he.copy(), np.zeros(n, dtype=bool)

    def g(x, idx):
        return wh * (x - he[idx]) + W[idx] * sigmoid(x) - S[idx]

    mu = np.empty(n)
    clamped = np.zeros(n, dtype=bool)
    # no information at all: keep the signal
    flat = (W == 0) & (wh == 0)
    mu[flat] = he[flat]

    idx = np.flatnonzero(~flat)
    C = float(mu_clamp)
    lo = np.full(idx.size, -C)
    hi = np.full(idx.size, C)
    g_lo = g(lo, idx)
    g_hi = g(hi, idx)
    below = g_lo >= 0
    above = g_hi <= 0
    mu[idx[below]] = -C
    mu[idx[above & ~below]] = C
    clamped[idx[below & (g_lo > 0)]] = True
    clamped[idx[above & ~below & (g_hi < 0)]] = True

    inner = ~(below | above)
    idx, lo, hi = idx[inner], lo[inner], hi[inner]
    if wh > 0 and idx.size:
        # wh*(mu - he) = S - W*sigmoid(mu) lies in [S - W, S]; tiny wh overflows to +-inf, harmless here
        with np.errstate(over="ignore"):
            lo = np.maximum(lo, he[idx] + (S[idx] - W[idx]) / wh)
            hi = np.minimum(hi, he[idx] + S[idx] / wh)
    x0 = he[idx] if start is None else np.asarray(start, dtype=float)[idx]
    x = np.clip(x0, lo, hi)

    it = 0
    while idx.size:
        gx = g(x, idx)
        done = np.abs(gx) <= tol
        done |= (hi - lo) <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(x))
        if done.any():
            mu[idx[done]] = x[done]
            keep = ~done
            idx, x, gx, lo, hi = idx[keep], x[keep], gx[keep], lo[keep], hi[keep]
            if not idx.size:
                break
        if it >= max_iters:
            raise NewtonError(float(np.max(np.abs(gx))), it)
        it += 1
        neg = gx < 0
        lo = np.where(neg, x, lo)
        hi = np.where(neg, hi, x)
        s = sigmoid(x)
        slope = wh + W[idx] * s * (1.0 - s)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = x - gx / slope
        bad = ~((step > lo) & (step < hi))
        x = np.where(bad, 0.5 * (lo + hi), step)
    return mu, clamped


def m_step_mu(group: GroupObservations, z_i, config: FitConfig) -> float:
    """Update one group's ``mu`` given its items' current ``z``."""
    z_i = np.asarray(z_i, dtype=float)
    W = np.array([group.weights.sum()])
    S = np.array([np.dot(group.weights, z_i)]) if z_i.size else np.zeros(1)
    mu, _ = solve_mu(
        np.array([group.he]),
        W,
        S,
        config.wh,
        config.mu_clamp,
        config.newton_tol,
        config.newton_max_iters,
    )
    return float(mu[0])


def mu_residual(he, total_weight, pos_weight, wh, mu):
    """Left side of the ``mu`` first-order condition; zero at the M-step solution."""
    return wh * (mu - he) + total_weight * sigmoid(mu) - pos_weight


def _m_step_w_cells(cells: Cells, z):
    K = cells.n_bins
    m1 = cells.weight * z
    m0 = cells.weight * (1.0 - z)
    c1 = np.bincount(cells.bin, weights=m1, minlength=K)
    c0 = np.bincount(cells.bin, weights=m0, minlength=K)
    w1 = (1.0 + c1) / (K + m1.sum())
    w0 = (1.0 + c0) / (K + m0.sum())
    return w0, w1


def m_step_w(dataset: Dataset, z):
    """Pseudo-count update of ``(w0, w1)`` from per-cell ``z``."""
    return _m_step_w_cells(dataset.cells(), np.asarray(z, dtype=float))


def _e_step_cells(cells: Cells, mu, w0, w1):
    s = sigmoid(mu)[cells.group] if cells.group.size else np.zeros(0)
    a = s * w1[cells.bin]
    mix = a + (1.0 - s) * w0[cells.bin]
    return a / mix, mix


def e_step(dataset: Dataset, state: LatentState) -> np.ndarray:
    """Posterior positive-class probability for every ``(group, bin)`` cell."""
    return _e_step_cells(dataset.cells(), state.mu, state.w0, state.w1)[0]


def initialize(dataset: Dataset, config: FitConfig) -> LatentState:
    """Start from the coarse signal: ``mu = he``, ``z = sigmoid(he)``."""
    check_dataset(dataset)
    cells = dataset.cells()
    mu = dataset.he.copy()
    if not math.isinf(config.wh):
        mu = np.clip(mu, -config.mu_clamp, config.mu_clamp)
    z = (sigmoid(mu)[cells.group] if cells.group.size else np.zeros(0))
    w0, w1 = _m_step_w_cells(cells, z)
    return LatentState(mu, z, w0, w1, [])


def final_rho(dataset: Dataset, state: LatentState) -> np.ndarray:
    return rho_from_z(dataset.cells(), state.z)


def _objective(cells, he, mu, w0, w1, mix, wh):
    data = float(np.dot(cells.weight, np.log(mix))) if mix.size else 0.0
    if math.isinf(wh) or wh == 0:
        pen = 0.0
    else:
        d = mu - he
        pen = wh * float(np.dot(d, d)) / 2.0
    return data - pen + smoothing_term(w0, w1)


def em_fit(dataset: Dataset, config: FitConfig | None = None) -> EmResult:
    """Run EM from the signal-based start until ``max |dz| < tol``.

    ``state.objective_trace`` holds the smoothed penalised log-likelihood
    (see :func:`coarse2fine.model.smoothed_objective`) at the starting point
    and after every sweep; it is nondecreasing up to rounding.
    """
    config = config or FitConfig()
    state = initialize(dataset, config)
    cells = dataset.cells()
    he = dataset.he
    W = np.bincount(cells.group, weights=cells.weight, minlength=dataset.n_groups)
    mu, z, w0, w1 = state.mu, state.z, state.w0, state.w1
    trace = []
    converged = False
    clamped = np.zeros(dataset.n_groups, dtype=bool)
    iterations = 0
    for iterations in range(1, config.max_iters + 1):
        z_new, mix = _e_step_cells(cells, mu, w0, w1)
        if np.any(mix <= 0):
            raise DivergenceError(f"mixture probability underflowed at iteration {iterations}")
        trace.append(_objective(cells, he, mu, w0, w1, mix, config.wh))
        delta = float(np.max(np.abs(z_new - z))) if z.size else 0.0
        z = z_new
        w0, w1 = _m_step_w_cells(cells, z)
        S = np.bincount(cells.group, weights=cells.weight * z, minlength=dataset.n_groups)
        mu, clamped = solve_mu(
            he,
            W,
            S,
            config.wh,
            config.mu_clamp,
            config.newton_tol,
            config.newton_max_iters,
            start=mu,
        )
        if delta < config.tol:
            converged = True
            break
    _, mix = _e_step_cells(cells, mu, w0, w1)
    trace.append(_objective(cells, he, mu, w0, w1, mix, config.wh))
    if not converged:
        logger.warning("EM stopped after %d iterations without converging", iterations)
    if clamped.any():
        logger.info("mu clamp bound for %d groups", int(clamped.sum()))
    state = LatentState(mu, z, w0, w1, trace)
    estimate = PosteriorEstimate(rho_from_z(cells, z), "em")
    return EmResult(estimate, state, iterations, converged, clamped)
