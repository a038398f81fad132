"""
nonlocal-rothe: implicit Euler solver and verification harness for
u_t + (-Delta)_p^s u = f on a bounded interval with zero exterior data.
"""

__version__ = "0.1.0"

from .core import Domain, Grid, GridFunction, SolverConfig, TimeGrid, Trajectory
from .kernel import KernelWeights, assemble
from .operator import NonlocalOperator, apply
from .stepper import AnalyticSource, TabulatedSource, solve, step_minimize
from .ladder import run_ladder
from .diagnostics import DiagnosticsReport, TestFunction, verify_trajectory

# Exposed so the CLI can be driven from code: nonlocal_rothe.main([...])
from .cli import main

__all__ = [
    "AnalyticSource",
    "DiagnosticsReport",
    "Domain",
    "Grid",
    "GridFunction",
    "KernelWeights",
    "NonlocalOperator",
    "SolverConfig",
    "TabulatedSource",
    "TestFunction",
    "TimeGrid",
    "Trajectory",
    "apply",
    "assemble",
    "main",
    "run_ladder",
    "solve",
    "step_minimize",
    "verify_trajectory",
    "__version__",
]
