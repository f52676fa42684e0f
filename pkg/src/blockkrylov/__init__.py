"""Block Krylov solvers for many right-hand sides over configurable coefficient algebras."""

__version__ = "0.1.0"

from .bicgstab import BicgstabConfig, bbicgstab_solve
from .blocklinalg import Preconditioner, SparseOperator, generate_poisson2d, generate_rhs, load_matrixmarket
from .cg import CgConfig, bcg_solve
from .comms import World
from .gmres import GmresConfig, OrthoStrategy, bgmres_solve
from .report import BreakdownError, SolverReport, StagnationError
from .salgebra import AlgebraSpec, SElement

__all__ = [
    "AlgebraSpec",
    "SElement",
    "SparseOperator",
    "Preconditioner",
    "World",
    "CgConfig",
    "GmresConfig",
    "OrthoStrategy",
    "BicgstabConfig",
    "SolverReport",
    "BreakdownError",
    "StagnationError",
    "bcg_solve",
    "bgmres_solve",
    "bbicgstab_solve",
    "generate_poisson2d",
    "generate_rhs",
    "load_matrixmarket",
]
