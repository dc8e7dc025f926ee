"""Weibull proportional-hazards models with Gaussian frailty for recurrent events."""
from __future__ import annotations

__version__ = "0.1.0"

from .cohort import Cohort, CovariateSchema, ModelSpec, build_design, correlation_screen, ingest_csv, write_csv
from .inference import (
    FitConfig,
    FitResult,
    bic,
    coefficient_report,
    fit_model,
    generalized_r2,
    hazard_ratio,
    stepwise_select,
    wald_joint_test,
)
from .likelihood import ParameterVector, eb_mode, marginal_loglik, select_quadrature_order
from .optimizer import OptimizerConfig, minimize, wald_covariance
from .prediction import (
    classify_risk,
    cohort_risk_summary,
    predict_cohort,
    predict_new,
    predict_subject,
    prediction_variance,
)
from .simulate import SimScenario, generate_cohort, recovery_report, sample_event_time

__all__ = [
    "Cohort", "CovariateSchema", "ModelSpec", "build_design", "correlation_screen", "ingest_csv", "write_csv",
    "FitConfig", "FitResult", "bic", "coefficient_report", "fit_model", "generalized_r2", "hazard_ratio",
    "stepwise_select", "wald_joint_test",
    "ParameterVector", "eb_mode", "marginal_loglik", "select_quadrature_order",
    "OptimizerConfig", "minimize", "wald_covariance",
    "classify_risk", "cohort_risk_summary", "predict_cohort", "predict_new", "predict_subject",
    "prediction_variance",
    "SimScenario", "generate_cohort", "recovery_report", "sample_event_time",
]
