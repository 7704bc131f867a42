"""Sampling from the generative model and the canned simulation scenarios.

Every group draws from its own random substream seeded by
``(seed, group_index)``, so the output does not depend on how groups are
scheduled across workers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .model import (
    BehaviorBinning,
    Dataset,
    GroupObservations,
    ModelParams,
    posterior_rho,
    sigmoid,
)


@dataclass
class SimulationConfig:
    n_groups: int
    items_per_group: Union[int, Sequence[int]]
    binning: BehaviorBinning
    true_rho: np.ndarray
    marginal_q: Optional[np.ndarray] = None
    mu_mean: float = 0.0
    mu_sd: float = 1.0
    sigma_h: float = 0.5
    seed: int = 0

    def __post_init__(self):
        K = self.binning.n_bins
        self.true_rho = np.asarray(self.true_rho, dtype=float)
        if self.marginal_q is None:
            self.marginal_q = np.full(K, 1.0 / K)
        self.marginal_q = np.asarray(self.marginal_q, dtype=float)
        if self.n_groups < 1:
            raise ValueError("n_groups must be positive")
        if self.true_rho.shape != (K,) or self.marginal_q.shape != (K,):
            raise ValueError(f"true_rho and marginal_q must have length {K}")
        if np.any(self.true_rho <= 0) or np.any(self.true_rho >= 1):
            raise ValueError("true_rho entries must lie in (0, 1)")
        if np.any(self.marginal_q <= 0) or abs(self.marginal_q.sum() - 1) > 1e-9:
            raise ValueError("marginal_q must be a strictly positive distribution")
        if self.sigma_h < 0 or self.mu_sd < 0:
            raise ValueError("standard deviations must be nonnegative")
        sizes = self.group_sizes()
        if np.any(sizes < 0):
            raise ValueError("items_per_group must be nonnegative")

    def group_sizes(self) -> np.ndarray:
        if np.ndim(self.items_per_group) == 0:
            return np.full(self.n_groups, int(self.items_per_group))
        sizes = np.asarray(self.items_per_group, dtype=np.int64)
        if sizes.shape != (self.n_groups,):
            raise ValueError("per-group items_per_group must have one entry per group")
        return sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["binning"] = {
            "n_bins": self.binning.n_bins,
            "factor_levels": list(self.binning.factor_levels),
            "labels": list(self.binning.labels),
        }
        d["true_rho"] = self.true_rho.tolist()
        d["marginal_q"] = self.marginal_q.tolist()
        if np.ndim(self.items_per_group) != 0:
            d["items_per_group"] = [int(v) for v in self.items_per_group]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        d = dict(d)
        b = d.pop("binning")
        if isinstance(b, dict):
            binning = BehaviorBinning(
                int(b["n_bins"]), tuple(b.get("factor_levels", ())), tuple(b.get("labels", ()))
            )
        else:
            binning = BehaviorBinning(int(b))
        return cls(binning=binning, **d)


@dataclass
class SimulatedTruth:
    dataset: Dataset
    true_mu: np.ndarray
    true_z: tuple
    true_params: ModelParams
    true_rho: np.ndarray


def params_from_rho(true_rho, marginal_q) -> ModelParams:
    """Invert Bayes' rule: class-conditional bin distributions from a target posterior."""
    rho = np.asarray(true_rho, dtype=float)
    q = np.asarray(marginal_q, dtype=float)
    pi = float(np.dot(q, rho))
    if not 1e-9 < pi < 1 - 1e-9:
        raise ValueError(f"implied prior {pi} is degenerate")
    w1 = q * rho / pi
    w0 = q * (1.0 - rho) / (1.0 - pi)
    return ModelParams(w0 / w0.sum(), w1 / w1.sum(), pi)


def group_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _sample_group(config, params, cdf0, cdf1, i, size):
    rng = group_rng(config.seed, i)
    mu = rng.normal(config.mu_mean, config.mu_sd)
    he = mu + rng.normal(0.0, config.sigma_h) if config.sigma_h > 0 else mu
    z = rng.random(size) < sigmoid(mu)
    u = rng.random(size)
    bins = np.where(z, np.searchsorted(cdf1, u, side="right"), np.searchsorted(cdf0, u, side="right"))
    bins = np.minimum(bins, params.w0.size - 1) + 1
    return mu, he, z, bins


def sample(config: SimulationConfig) -> SimulatedTruth:
    """Draw one dataset (with item labels) from the generative model."""
    params = params_from_rho(config.true_rho, config.marginal_q)
    cdf0 = np.cumsum(params.w0)
    cdf1 = np.cumsum(params.w1)
    sizes = config.group_sizes()
    width = len(str(config.n_groups - 1))
    groups, mus, zs = [], [], []
    for i, size in enumerate(sizes):
        mu, he, z, bins = _sample_group(config, params, cdf0, cdf1, i, int(size))
        groups.append(GroupObservations(f"g{i:0{width}d}", he, bins))
        mus.append(mu)
        zs.append(z)
    labels = tuple(z.astype(float) for z in zs)
    dataset = Dataset(config.binning, tuple(groups), labels)
    return SimulatedTruth(
        dataset, np.array(mus), tuple(zs), params, posterior_rho(params).rho
    )


def s_curve(n_bins: int = 15, start: float = -2.8, step: float = 0.4) -> np.ndarray:
    return sigmoid(start + step * np.arange(n_bins))


def figure4_scenario(items_per_group: int, seed: int = 0) -> SimulationConfig:
    """500 groups, 15 bins, ``mu ~ N(0, 1)``, rater noise 0.5, J = 5 or 100."""
    if items_per_group not in (5, 100):
        raise ValueError(f"items_per_group must be 5 or 100, got {items_per_group}")
    return SimulationConfig(
        n_groups=500,
        items_per_group=items_per_group,
        binning=BehaviorBinning(15),
        true_rho=s_curve(15),
        mu_mean=0.0,
        mu_sd=1.0,
        sigma_h=0.5,
        seed=seed,
    )


SCENARIOS = {
    "fig4a": lambda seed=0: figure4_scenario(5, seed),
    "fig4b": lambda seed=0: figure4_scenario(100, seed),
}
