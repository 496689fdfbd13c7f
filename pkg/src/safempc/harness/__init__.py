"""Simulated experiments, traces and figure data."""

from .config import ExperimentConfig
from .figures import emit_figures
from .report import stability_report, write_report
from .scalar_run import run_scalar_experiment
from .trace import RunTrace
from .truth import SimTruth, regular_octagon
from .tube_run import run_tube_experiment

__all__ = ["ExperimentConfig", "RunTrace", "SimTruth", "emit_figures", "regular_octagon", "run_scalar_experiment",
           "run_tube_experiment", "stability_report", "write_report"]
