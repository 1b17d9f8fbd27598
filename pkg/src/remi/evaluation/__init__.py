"""Experiment orchestration, metrics and reports."""

from remi.evaluation.config import ExperimentConfig, load_config
from remi.evaluation.experiment import STAGES, run_experiment, run_stage
from remi.evaluation.metrics import cross_attack_eval, efficacy_proxy
from remi.evaluation.report import COLUMNS, RunReport

__all__ = [
    "COLUMNS", "ExperimentConfig", "RunReport", "STAGES", "cross_attack_eval", "efficacy_proxy",
    "load_config", "run_experiment", "run_stage",
]
