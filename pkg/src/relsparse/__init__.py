"""Relatively sparse, KL-constrained policy estimation with post-selection inference."""

__version__ = "0.1.0"

from .behavioral import BehavioralFit, calibration_table, fit_mle, influence_q
from .inference import InferenceResult, confidence_intervals, post_select_fit, sandwich_variance
from .pipeline import PipelineReport, run_pipeline
from .policy import MaskedPolicy, PolicyParams, log_prob, log_prob_derivs, prob_treat
from .relspar import adaptive_weights, fit_relspar, lambda_path, select_lambda
from .simulate import SimConfig, coverage_study, gen_dataset, reference_estimand, selection_study
from .trajectories import Dataset, SplitSpec, load_dataset, scale_states, split_dataset
from .trpo_objective import FitConfig, derivative_bundle, fit_trpo, kl_n, m_n
from .value import is_ratios, value_variance, value_weighted

__all__ = [
    "BehavioralFit",
    "Dataset",
    "FitConfig",
    "InferenceResult",
    "MaskedPolicy",
    "PipelineReport",
    "PolicyParams",
    "SimConfig",
    "SplitSpec",
    "adaptive_weights",
    "calibration_table",
    "confidence_intervals",
    "coverage_study",
    "derivative_bundle",
    "fit_mle",
    "fit_relspar",
    "fit_trpo",
    "gen_dataset",
    "influence_q",
    "is_ratios",
    "kl_n",
    "lambda_path",
    "load_dataset",
    "log_prob",
    "log_prob_derivs",
    "m_n",
    "post_select_fit",
    "prob_treat",
    "reference_estimand",
    "run_pipeline",
    "sandwich_variance",
    "scale_states",
    "select_lambda",
    "selection_study",
    "split_dataset",
    "value_variance",
    "value_weighted",
]
