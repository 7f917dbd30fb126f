"""Degenerate interface problems: a neural network near the interface, finite differences elsewhere."""
from .errors import DefuseError
from .fdsolver import DecoupledSolution, ExactOracle, GridFunction, solve_decoupled, solve_picard
from .geometry import GridSpec, Label, LevelSet, RegionMap, classify, project_to_interface
from .harness import StudyTable, convergence_study, emit, order
from .jetnet import Jet, NetworkParams, PairedNet, anchored_jet, forward_jet, param_gradient
from .loss import LossBreakdown, LossProblem, LossWeights, SampleSet
from .problems import ProblemSpec, exact_error, get_problem, problem_names, region_map, residual_metric
from .trainer import TrainConfig, TrainedNet, train

__version__ = "0.1.0"

__all__ = [
    "DecoupledSolution", "DefuseError", "ExactOracle", "GridFunction", "GridSpec", "Jet", "Label", "LevelSet",
    "LossBreakdown", "LossProblem", "LossWeights", "NetworkParams", "PairedNet", "ProblemSpec", "RegionMap",
    "SampleSet", "StudyTable", "TrainConfig", "TrainedNet", "anchored_jet", "classify", "convergence_study", "emit",
    "exact_error", "forward_jet", "get_problem", "order", "param_gradient", "problem_names", "project_to_interface",
    "region_map", "residual_metric", "solve_decoupled", "solve_picard", "train",
]
