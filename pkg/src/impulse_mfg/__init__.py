"""Impulse-control mean field games on torus grids.

Penalized Fokker-Planck equations for jumping particles, QVI solvers for
impulse control, the coupled MFG system and a particle oracle.
"""

from .fokker_planck import (
    MassBalanceError,
    PositivityError,
    check_fp_solution,
    duality_value,
    epsilon_sweep,
    solve_penalized_multi,
    solve_penalized_single,
    solve_penalized_stationary,
)
from .grid import LatticeJump, TorusGrid, adjoint_pairing, integrate, laplacian, shift
from .mfg import (
    Coupling,
    IterConfig,
    check_mfg_solution,
    optimal_control_objective,
    solve_penalized_mfg,
    solve_stationary_mfg,
    stationary_duality,
)
from .oracle import simulate_limit, simulate_penalized
from .qvi import (
    ConvergenceError,
    HypothesisViolation,
    JumpSystem,
    apply_M,
    solve_constrained_equality,
    solve_qvi,
    solve_stationary_qvi,
)
from .timedomain import DomainMask, build_adjoint_test, solve_penalized_dirichlet, uniqueness_probe

__version__ = "0.1.0"

__all__ = [
    "TorusGrid", "LatticeJump", "shift", "laplacian", "integrate", "adjoint_pairing",
    "JumpSystem", "apply_M", "solve_qvi", "solve_stationary_qvi", "solve_constrained_equality",
    "ConvergenceError", "HypothesisViolation",
    "solve_penalized_single", "solve_penalized_multi", "solve_penalized_stationary", "epsilon_sweep",
    "duality_value", "check_fp_solution", "PositivityError", "MassBalanceError",
    "Coupling", "IterConfig", "solve_penalized_mfg", "check_mfg_solution", "solve_stationary_mfg",
    "stationary_duality", "optimal_control_objective",
    "DomainMask", "solve_penalized_dirichlet", "build_adjoint_test", "uniqueness_probe",
    "simulate_penalized", "simulate_limit",
]
