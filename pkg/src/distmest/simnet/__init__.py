"""Simulated federation and Monte Carlo experiments."""

from .generate import generate_eiv, generate_logistic, generate_logistic_blocks, logistic_lambdas
from .protocol import ESTIMATORS, CommLog, ProtocolMessage, ProtocolResult, run_protocol, run_protocols

__all__ = [
    "ESTIMATORS",
    "CommLog",
    "ProtocolMessage",
    "ProtocolResult",
    "generate_eiv",
    "generate_logistic",
    "generate_logistic_blocks",
    "logistic_lambdas",
    "run_protocol",
    "run_protocols",
]

from .experiment import (  # noqa: E402
    ExperimentConfig,
    ExperimentReport,
    EstimatorMetrics,
    load_config,
    monte_carlo,
    reports_from_json,
    reports_to_csv,
    reports_to_json,
    sweep,
)

__all__ += [
    "ExperimentConfig",
    "ExperimentReport",
    "EstimatorMetrics",
    "load_config",
    "monte_carlo",
    "reports_from_json",
    "reports_to_csv",
    "reports_to_json",
    "sweep",
]
