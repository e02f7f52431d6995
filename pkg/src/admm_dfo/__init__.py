"""Two-level inexact ADMM with trust-region derivative-free block solvers."""

from .admm import (
    AdmmResult,
    InnerStallError,
    OuterConfig,
    ParallelMode,
    RunTrace,
    ToleranceSchedule,
    solve,
)
from .problem import (
    AdmmState,
    BlockProblem,
    ConfigurationError,
    DimensionError,
    LocalObjective,
    OracleError,
    SharedObjective,
    Smoothness,
)
from .tr_nonsmooth import NonsmoothTrConfig, solve_nonsmooth
from .tr_smooth import BudgetError, SmoothTrConfig, solve_smooth

__all__ = [
    "AdmmResult",
    "AdmmState",
    "BlockProblem",
    "BudgetError",
    "ConfigurationError",
    "DimensionError",
    "InnerStallError",
    "LocalObjective",
    "NonsmoothTrConfig",
    "OracleError",
    "OuterConfig",
    "ParallelMode",
    "RunTrace",
    "SharedObjective",
    "SmoothTrConfig",
    "Smoothness",
    "ToleranceSchedule",
    "solve",
    "solve_nonsmooth",
    "solve_smooth",
]
