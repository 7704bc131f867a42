"""Weakly supervised clustering: per-bin class posteriors from group-level signals."""

__version__ = "0.1.0"

from .analysis import (
    EvalReport,
    SubsampleSpec,
    cross_validate,
    downweight,
    oracle_fit,
    predict_items,
    subsample_se,
)
from .api import LatentClassEstimator, MomentsEstimator, NaiveEstimator, OracleEstimator
from .em import EmResult, FitConfig, e_step, em_fit, initialize, m_step_mu, m_step_w
from .estimators import OmegaMatrix, build_omega, mom_fit, naive_fit
from .model import (
    BehaviorBinning,
    Dataset,
    GroupObservations,
    LatentState,
    ModelParams,
    PosteriorEstimate,
    make_dataset,
    penalized_loglik,
    posterior_rho,
    sigmoid,
    validate_dataset,
)
from .simulation import SimulationConfig, figure4_scenario, params_from_rho, sample

__all__ = [
    "BehaviorBinning",
    "Dataset",
    "EmResult",
    "EvalReport",
    "FitConfig",
    "GroupObservations",
    "LatentClassEstimator",
    "LatentState",
    "ModelParams",
    "MomentsEstimator",
    "NaiveEstimator",
    "OmegaMatrix",
    "OracleEstimator",
    "PosteriorEstimate",
    "SimulationConfig",
    "SubsampleSpec",
    "build_omega",
    "cross_validate",
    "downweight",
    "e_step",
    "em_fit",
    "figure4_scenario",
    "initialize",
    "m_step_mu",
    "m_step_w",
    "make_dataset",
    "mom_fit",
    "naive_fit",
    "oracle_fit",
    "params_from_rho",
    "penalized_loglik",
    "posterior_rho",
    "predict_items",
    "sample",
    "sigmoid",
    "subsample_se",
    "validate_dataset",
]
