"""Constrained and reflected backward equations on a binomial lattice."""

from .core import (
    ConfigError,
    ConstraintSpec,
    GeneratorSpec,
    InputError,
    MarketModel,
    NumericError,
    ObstacleSpec,
    TerminalPayoff,
    TimeGrid,
    distance_to_constraint,
    project_to_constraint,
)
from .lattice import Lattice, NodeField, build_lattice, build_path_tree
from .solver import (
    PenaltySchedule,
    SolveResult,
    compare_solutions,
    implicit_step,
    solve_constrained_reflected,
    solve_penalized,
    solve_plain,
    solve_reflected,
)

__version__ = "0.1.0"
