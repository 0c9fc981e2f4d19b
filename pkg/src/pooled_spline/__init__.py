"""Calibrated restricted-cubic-spline analysis of biomarker data pooled from
matched or nested case-control studies."""

__version__ = "0.1.0"

from ._backend import BACKEND
from .calibration import (CalibrationFit, CalibrationStrategy, calibrate, fit_calibration,
                          fit_study_calibrations)
from .data import PooledDataset, Stratum
from .inference import FitResult, analyze, log_rr_curve, sandwich_vcov, wald_test
from .likelihood import (ModelCoefficients, SolverControls, fit, stratum_loglik, stratum_score)
from .simulation import (OperatingCharacteristics, SimulationConfig, generate_dataset,
                         run_battery, variance_ratio_battery)
from .splines import SplineBasis, eval_basis, make_basis, normal_basis

__all__ = [
    "BACKEND", "CalibrationFit", "CalibrationStrategy", "FitResult", "ModelCoefficients",
    "OperatingCharacteristics", "PooledDataset", "SimulationConfig", "SolverControls",
    "SplineBasis", "Stratum", "analyze", "calibrate", "eval_basis", "fit", "fit_calibration",
    "fit_study_calibrations", "generate_dataset", "log_rr_curve", "make_basis", "normal_basis",
    "run_battery", "sandwich_vcov", "stratum_loglik", "stratum_score", "variance_ratio_battery",
    "wald_test",
]
