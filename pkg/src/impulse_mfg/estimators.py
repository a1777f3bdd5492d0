"""scikit-learn style wrappers over the functional solvers.

Grid parameters are plain constructor arguments so that ``get_params`` and
``clone`` behave as usual. Inputs are flat grid fields; point queries take
rows ``(t, x_1, .., x_d)`` and return the value at the nearest grid node.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .fokker_planck import solve_penalized_multi
from .grid import TorusGrid
from .mfg import Coupling, IterConfig, solve_penalized_mfg
from .oracle import simulate_penalized
from .qvi import JumpSystem, solve_qvi


class _GridMixin:
    def _grid(self):
        return TorusGrid(d=self.d, n=self.n, T=self.T, nt=self.nt, nu=self.nu)

    def _jump_system(self, grid, intensity=None):
        return JumpSystem(grid, list(self.jumps), self.cost, float(np.min(self.cost)), intensity)

    def _intensity(self, grid):
        if self.mask is None:
            return None
        A = np.asarray(self.mask, dtype=np.float64)
        K = len(self.jumps)
        if A.ndim == 1:
            A = np.broadcast_to(A, (grid.nt + 1, grid.size))
        if A.ndim == 2:
            A = np.broadcast_to(A, (K, grid.nt + 1, grid.size))
        return np.ascontiguousarray(A)

    def _check_fitted(self, attr):
        if not hasattr(self, attr):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    @staticmethod
    def _lookup(field, grid, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != grid.d + 1:
            raise ValueError(f"queries need {grid.d + 1} columns (t, x...), got {X.shape[1]}")
        k = np.clip(np.rint(X[:, 0] / grid.dt).astype(np.int64), 0, grid.nt)
        return field[k, grid.nearest_index(X[:, 1:])]


class PenalizedFokkerPlanck(_GridMixin, TransformerMixin, BaseEstimator):
    """Penalized density of jumping particles.

    ``fit(m0)`` solves the forward problem for one initial density.
    ``transform(X)`` maps each row of ``X`` (an initial density) to its
    density at ``t = T``.
    """

    def __init__(self, d=1, n=32, nt=64, T=1.0, nu=0.02, jumps=((16,),), cost=1.0, mask=None, epsilon=1e-3):
        self.d = d
        self.n = n
        self.nt = nt
        self.T = T
        self.nu = nu
        self.jumps = jumps
        self.cost = cost
        self.mask = mask
        self.epsilon = epsilon

    def fit(self, X, y=None):
        grid = self._grid()
        js = self._jump_system(grid, self._intensity(grid))
        run = solve_penalized_multi(np.asarray(X, dtype=np.float64).reshape(grid.size), js, self.epsilon, grid)
        self.grid_ = grid
        self.density_ = run.m
        self.mass_trace_ = run.mass_trace
        self.duality_ = -run.penalty_integral
        self.int_A_ = run.integral_on_A()
        return self

    def transform(self, X):
        self._check_fitted("grid_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        js = self._jump_system(self.grid_, self._intensity(self.grid_))
        return np.stack([solve_penalized_multi(row, js, self.epsilon, self.grid_).m[-1] for row in X])

    def predict(self, X):
        """Fitted density at query points ``(t, x...)``."""
        self._check_fitted("density_")
        return self._lookup(self.density_, self.grid_, X)


class QVISolver(_GridMixin, BaseEstimator):
    """Value function of impulse control with running cost ``f``."""

    def __init__(self, d=1, n=32, nt=64, T=1.0, nu=0.02, jumps=((16,),), cost=1.0, omega=1.5, tol=1e-11):
        self.d = d
        self.n = n
        self.nt = nt
        self.T = T
        self.nu = nu
        self.jumps = jumps
        self.cost = cost
        self.omega = omega
        self.tol = tol

    def fit(self, X, y=None):
        """``X`` is the running cost: a scalar field (time independent) or a space-time field."""
        grid = self._grid()
        f = np.asarray(X, dtype=np.float64)
        if f.size == grid.size:
            f = np.broadcast_to(f.reshape(grid.size), (grid.nt + 1, grid.size))
        sol = solve_qvi(self._jump_system(grid), f, grid, omega=self.omega, tol_pde=self.tol, tol_outer=self.tol)
        self.grid_ = grid
        self.value_ = sol.u
        self.active_ = sol.active
        self.n_iter_ = sol.outer_iterations
        self.residuals_ = sol.summary()
        return self

    def predict(self, X):
        self._check_fitted("value_")
        return self._lookup(self.value_, self.grid_, X)


class ImpulseMFG(_GridMixin, BaseEstimator):
    """Penalized impulse-control mean field game with a local power coupling."""

    def __init__(self, d=1, n=32, nt=32, T=1.0, nu=0.02, jumps=((16,),), cost=0.2, coupling_c=1.0,
                 coupling_p=1.0, background=None, epsilon=1e-8, theta="corrective", max_iter=300, m_init=None):
        self.d = d
        self.n = n
        self.nt = nt
        self.T = T
        self.nu = nu
        self.jumps = jumps
        self.cost = cost
        self.coupling_c = coupling_c
        self.coupling_p = coupling_p
        self.background = background
        self.epsilon = epsilon
        self.theta = theta
        self.max_iter = max_iter
        self.m_init = m_init

    def fit(self, X, y=None):
        """``X`` is the initial density ``m0``."""
        grid = self._grid()
        coupling = Coupling(c=self.coupling_c, p=self.coupling_p, background=self.background)
        sol = solve_penalized_mfg(np.asarray(X, dtype=np.float64).reshape(grid.size), self._jump_system(grid),
                                  coupling, self.epsilon, grid, IterConfig(theta=self.theta, max_fixed=self.max_iter),
                                  m_init=self.m_init)
        self.grid_ = grid
        self.solution_ = sol
        self.density_ = sol.m
        self.value_ = sol.u
        self.n_iter_ = sol.iterations
        self.converged_ = sol.converged
        self.residuals_ = sol.residuals
        return self

    def predict(self, X):
        """Equilibrium density at query points ``(t, x...)``."""
        self._check_fitted("density_")
        return self._lookup(self.density_, self.grid_, X)

    def value(self, X):
        self._check_fitted("value_")
        return self._lookup(self.value_, self.grid_, X)


class ParticleOracle(_GridMixin, BaseEstimator):
    """Monte-Carlo estimate of the penalized density."""

    def __init__(self, d=1, n=32, nt=64, T=1.0, nu=0.02, jumps=((16,),), cost=1.0, mask=None, epsilon=1e-2,
                 n_particles=100000, seed=0):
        self.d = d
        self.n = n
        self.nt = nt
        self.T = T
        self.nu = nu
        self.jumps = jumps
        self.cost = cost
        self.mask = mask
        self.epsilon = epsilon
        self.n_particles = n_particles
        self.seed = seed

    def fit(self, X, y=None):
        grid = self._grid()
        intensity = self._intensity(grid)
        if intensity is None:
            intensity = np.zeros((len(self.jumps), grid.nt + 1, grid.size))
        js = self._jump_system(grid, intensity)
        self.grid_ = grid
        self.ensemble_ = simulate_penalized(np.asarray(X, dtype=np.float64).reshape(grid.size), js, self.epsilon,
                                            grid, self.n_particles, self.seed)
        return self

    def transform(self, X=None):
        """Histogram densities per time level, shape ``(nt + 1, n**d)``."""
        self._check_fitted("ensemble_")
        return self.ensemble_.density(self.grid_).astype(np.float64)
