"""Feedback-free FDD massive-MIMO downlink: 2D-NOMP channel reconstruction,
O-FIM error-covariance estimation and RSMA precoding by generalized power
iteration."""

from .channel import (
    PathSet,
    SystemConfig,
    UlObservation,
    dl_channel,
    dl_gains,
    sample_paths,
    signature,
    simulate_ul_observation,
)
from .ecm import EcmEstimate, ParamVector, crlb, dl_jacobian, ecm_calibrate, ecm_estimate, fim, ofim
from .nomp import EstimatedPaths, NompConfig, run_nomp
from .rsma import (
    PrecoderStack,
    QuadraticSet,
    baseline_mrt,
    baseline_rzf,
    build_quadratics,
    gpi_solve,
    kkt_matrices,
    lse_min,
    objective,
    rsma_gpi_solve,
    sdma_gpi_solve,
)
from .evaluation import ExperimentSpec, Scenario, TrialResult, run_experiment, run_trial, se_genie, se_lower_bound

__version__ = "0.1.0"

__all__ = [
    "PathSet", "SystemConfig", "UlObservation", "dl_channel", "dl_gains", "sample_paths", "signature",
    "simulate_ul_observation", "EcmEstimate", "ParamVector", "crlb", "dl_jacobian", "ecm_calibrate",
    "ecm_estimate", "fim", "ofim", "EstimatedPaths", "NompConfig", "run_nomp", "PrecoderStack",
    "QuadraticSet", "baseline_mrt", "baseline_rzf", "build_quadratics", "gpi_solve", "kkt_matrices",
    "lse_min", "objective", "rsma_gpi_solve", "sdma_gpi_solve", "ExperimentSpec", "Scenario",
    "TrialResult", "run_experiment", "run_trial", "se_genie", "se_lower_bound",
]
