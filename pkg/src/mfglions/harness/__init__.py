"""Configuration, experiments and the command line interface."""
from .cli import main, run
from .config import RunConfig, load_config, parse_config
from .experiments import (
    ConvergenceReport,
    Outcome,
    UniquenessReport,
    discretization_convergence,
    draw_eta,
    draw_xi,
    weak_uniqueness_test,
)

__all__ = [
    "main",
    "run",
    "RunConfig",
    "load_config",
    "parse_config",
    "Outcome",
    "UniquenessReport",
    "ConvergenceReport",
    "weak_uniqueness_test",
    "discretization_convergence",
    "draw_xi",
    "draw_eta",
]
