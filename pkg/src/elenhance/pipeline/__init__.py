"""End-to-end orchestration: config, cached stages, lineages and conversion."""
from .config import DEFAULTS, SYSTEMS, load_config
from .convert import Converter, convert_file
from .evaluate import evaluate_experiment, evaluate_system, run_and_evaluate
from .lineage import SystemLineage
from .run import ROOT_ENV, ExperimentResult, run_experiment

__all__ = [
    "DEFAULTS",
    "ROOT_ENV",
    "SYSTEMS",
    "Converter",
    "ExperimentResult",
    "SystemLineage",
    "convert_file",
    "evaluate_experiment",
    "evaluate_system",
    "load_config",
    "run_and_evaluate",
    "run_experiment",
]
