"""Desk-scale numerics for semilinear path-dependent PDEs on binary path trees."""

from .generators import Generator, NodeState
from .nlexp import DriftControl, conditional_inf, conditional_sup, inf_expectation, sup_expectation
from .pathspace import PathPoint, PathTree, StoppingRegion, TreeProcess
from .snell import SnellResult, brute_force_snell, snell_envelope
from .solver import TerminalCondition, comparison_check, default_tol, perron_construct, ppde_solve
from .viscosity import JetCandidate, JetSample, check_subsolution, check_supersolution

__version__ = "0.1.0"

__all__ = [
    "DriftControl",
    "Generator",
    "JetCandidate",
    "JetSample",
    "NodeState",
    "PathPoint",
    "PathTree",
    "SnellResult",
    "StoppingRegion",
    "TerminalCondition",
    "TreeProcess",
    "brute_force_snell",
    "check_subsolution",
    "check_supersolution",
    "comparison_check",
    "default_tol",
    "conditional_inf",
    "conditional_sup",
    "inf_expectation",
    "perron_construct",
    "ppde_solve",
    "snell_envelope",
    "sup_expectation",
]
