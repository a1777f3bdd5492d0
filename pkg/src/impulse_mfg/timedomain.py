"""Heat equations in time-dependent domains and the adjoint test functions.

``solve_penalized_dirichlet`` marches forward with a penalty pulling ``u``
toward ``phi`` on ``A``. ``build_adjoint_test`` constructs a backward test
function ``v`` that solves a perturbed heat equation off ``A`` and satisfies
``v = Mv`` on ``A``, by a monotone fixed-point iteration started from a QVI
subsolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ._linalg import SparseSolver, use_direct
from ._validation import check_mask, check_positive, check_spacetime_field
from .grid import adjoint_pairing, backward_operator
from .qvi import ConvergenceError, apply_M, solve_constrained_equality, solve_qvi


@dataclass
class DomainMask:
    """PDE region ``B`` and its complement ``A`` on the space-time grid."""

    grid: object
    B: np.ndarray
    monotonicity: str = "general"

    def __post_init__(self):
        self.B = check_mask(self.B, self.grid, "B", spacetime=True).copy()
        if self.monotonicity not in ("nondecreasing", "lipschitz", "general"):
            raise ValueError(f"unknown monotonicity {self.monotonicity!r}")
        if self.monotonicity == "nondecreasing":
            grew = self.B[:-1] & ~self.B[1:]
            if grew.any():
                k = int(np.nonzero(grew.any(axis=1))[0][0])
                raise ValueError(f"B is declared nondecreasing but shrinks between levels {k} and {k + 1}")

    @classmethod
    def from_A(cls, grid, A, monotonicity="general"):
        A = check_mask(A, grid, "A", spacetime=True)
        return cls(grid, ~A, monotonicity)

    @property
    def A(self):
        return ~self.B


@dataclass
class DirichletRun:
    u: np.ndarray
    epsilon: float
    sup_error_on_A: float
    energy: float


def solve_penalized_dirichlet(phi, f, mask, epsilon, grid):
    """Implicit march of ``d_t u - nu Lap u + (1/eps) 1_A (u - phi) = f`` with ``u[0] = phi[0]``.

    Level ``k+1`` data (mask, ``phi``, ``f``) enter the step ``k -> k+1``.
    """
    phi = check_spacetime_field(phi, grid, "phi")
    f = check_spacetime_field(f, grid, "f")
    epsilon = check_positive(epsilon, "epsilon")
    A = mask.A
    base = (sp.identity(grid.size, format="csr") / grid.dt - grid.nu * grid.laplacian_matrix).tocsr()
    direct = use_direct(grid)
    u = np.empty((grid.nt + 1, grid.size))
    u[0] = phi[0]
    cache = {}
    for k in range(grid.nt):
        a = A[k + 1].astype(np.float64)
        key = A[k + 1].tobytes()
        if key not in cache:
            cache[key] = SparseSolver(base + sp.diags(a / epsilon), direct=direct)
        u[k + 1] = cache[key].solve(u[k] / grid.dt + f[k + 1] + a * phi[k + 1] / epsilon)
    err = np.abs(u - phi)[A]
    grad = np.concatenate([np.diff(u.reshape((grid.nt + 1,) + grid.shape), axis=1 + ax, append=u.reshape(
        (grid.nt + 1,) + grid.shape).take([0], axis=1 + ax)).reshape(grid.nt + 1, -1) for ax in range(grid.d)], axis=1)
    energy = grid.dt * grid.cell_volume * (np.sum(u[1:] ** 2) + np.sum(grad[1:] ** 2) / grid.h**2)
    return DirichletRun(u=u, epsilon=float(epsilon), sup_error_on_A=float(err.max()) if err.size else 0.0,
                        energy=float(energy))


@dataclass
class AdjointResult:
    v: np.ndarray
    iterations: int
    converged: bool
    lower: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)
    bracket_violation: float = 0.0
    constraint_residual: float = 0.0
    pde_residual: float = 0.0
    separation_margin: float = np.inf
    history: list = field(default_factory=list)

    def report(self):
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "bracket_violation": self.bracket_violation,
            "constraint_residual": self.constraint_residual,
            "pde_residual": self.pde_residual,
            "separation_margin": self.separation_margin,
        }


class AdjointOperator:
    """The map ``w -> T(w)`` of a backward heat solve in ``B`` with ``v = Mw`` on ``A``.

    ``source`` is the full right-hand side used in ``B``.
    """

    def __init__(self, js, source, grid):
        self.js = js
        self.grid = grid
        self.source = check_spacetime_field(source, grid, "source")
        masks = js.jump_masks()
        if masks.ndim == 2:
            masks = np.broadcast_to(masks[:, None, :], (js.n_jumps, grid.nt + 1, grid.size))
        self.A = masks.any(axis=0)
        self._heat = (sp.identity(grid.size, format="csr") / grid.dt - grid.nu * grid.laplacian_matrix).tocsr()
        self._cache = {}

    def _solver(self, i):
        key = self.A[i].tobytes()
        if key not in self._cache:
            off = sp.diags((~self.A[i]).astype(np.float64))
            on = sp.diags(self.A[i].astype(np.float64))
            self._cache[key] = SparseSolver(off @ self._heat + on, direct=use_direct(self.grid))
        return self._cache[key]

    def __call__(self, w):
        g = self.grid
        Mw, _ = apply_M(self.js, w)
        v = np.zeros((g.nt + 1, g.size))
        for i in range(g.nt - 1, -1, -1):
            rhs = np.where(self.A[i], Mw[i], self.source[i] + v[i + 1] / g.dt)
            v[i] = self._solver(i).solve(rhs)
        return v


def adjoint_brackets(js, u_star, f_perturb, grid):
    """``(v1, v2)`` with ``v1 <= T(v1)`` and ``T(v2) <= v2``.

    ``v1`` solves the QVI with source ``g = B u* + f``; ``v2 = 2 u* - w`` where
    ``w`` solves the QVI with source ``2 B u* - g``.
    """
    Bu = np.zeros((grid.nt + 1, grid.size))
    Bu[:-1] = backward_operator(u_star, grid)
    g = Bu + f_perturb
    lb = 1e12
    v1 = solve_qvi(js, g, grid, lower_bound=lb).u
    w = solve_qvi(js, 2 * Bu - g, grid, lower_bound=lb).u
    return v1, 2 * u_star - w, g


def build_adjoint_test(js, u_star, f_perturb, grid=None, eps_bound=None, separation_margin=None,
                       tol_outer=1e-11, max_iter=5000, tol_bracket=1e-9):
    """Monotone fixed point ``v <- T(v)`` from the lower bracket ``v1``.

    ``v`` solves ``B v = B u* + f_perturb`` off ``A`` and ``v = Mv`` on ``A``
    with ``v[nt] = u*[nt]``. Perturbations larger than ``eps_bound``
    (default ``0.1 k0 / T``) or larger than half the separation margin of
    ``u*`` (as a value change ``T * |f|``) are rejected.
    """
    grid = grid or js.grid
    u_star = check_spacetime_field(u_star, grid, "u_star")
    f_perturb = check_spacetime_field(f_perturb, grid, "f_perturb")
    if js.intensity is None:
        raise ValueError("build_adjoint_test needs a jump system with intensity")
    if eps_bound is None:
        eps_bound = 0.1 * js.k0 / grid.T
    size = float(np.max(np.abs(f_perturb)))
    if size > eps_bound:
        raise ValueError(f"perturbation sup-norm {size:.3e} exceeds eps_bound {eps_bound:.3e}")
    if separation_margin is not None and np.isfinite(separation_margin) and grid.T * size > 0.5 * separation_margin:
        raise ValueError(
            f"perturbation moves values by up to {grid.T * size:.3e}, more than half the separation margin "
            f"{separation_margin:.3e}"
        )
    v1, v2, g = adjoint_brackets(js, u_star, f_perturb, grid)
    T = AdjointOperator(js, g, grid)
    v = v1.copy()
    history = []
    viol = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new = T(v)
        viol = max(viol, float(np.max(v1 - new)), float(np.max(new - v2)))
        change = float(np.max(np.abs(new - v)))
        history.append(change)
        v = new
        if change <= tol_outer:
            converged = True
            break
    Mv, _ = apply_M(js, v)
    A = T.A
    cres = float(np.max(np.abs((v - Mv)[:-1][A[:-1]]))) if A[:-1].any() else 0.0
    r = backward_operator(v, grid) - g[:-1]
    pres = float(np.max(np.abs(r[~A[:-1]]))) if (~A[:-1]).any() else 0.0
    result = AdjointResult(
        v=v, iterations=it, converged=converged, lower=v1, upper=v2, bracket_violation=max(viol, 0.0),
        constraint_residual=cres, pde_residual=pres,
        separation_margin=np.inf if separation_margin is None else float(separation_margin), history=history,
    )
    if not converged:
        raise ConvergenceError(
            f"adjoint iteration did not converge in {max_iter} steps (last change {history[-1]:.3e}); "
            f"bracket width {float(np.max(v2 - v1)):.3e}",
            history[-1], max_iter,
        )
    return result


def spacetime_norm(x, grid):
    return float(np.sqrt(grid.dt * grid.cell_volume * np.sum(np.asarray(x) ** 2)))


def uniqueness_probe(m1, m2, m0, js, perturbations, grid=None):
    """Adjoint probe comparing two candidate limit densities of one problem.

    For each perturbation ``f``: ``X = P(v_f - u*, m1 - m2)`` with ``v_f`` from
    :func:`build_adjoint_test` and ``Y = dt h^d sum (m1[i+1] - m2[i+1]) f[i]``.
    Both vanish for exact limit densities with a common initial condition.
    """
    grid = grid or js.grid
    cs = solve_constrained_equality(js, np.zeros((grid.nt + 1, grid.size)), grid)
    dm = np.asarray(m1) - np.asarray(m2)
    zero0 = np.zeros(grid.size)
    mnorm = max(spacetime_norm(m1, grid), spacetime_norm(m2, grid))
    rows = []
    for f in perturbations:
        adj = build_adjoint_test(js, cs.u, f, grid, separation_margin=cs.separation_margin)
        X = adjoint_pairing(dm, adj.v - cs.u, zero0, grid)
        Y = grid.dt * grid.cell_volume * float(np.sum(dm[1:] * f[:-1]))
        fnorm = spacetime_norm(f[:-1], grid)
        rows.append({
            "X": X, "Y": Y, "cross_difference": abs(X - Y), "scale": mnorm * fnorm,
            "relative": abs(Y) / max(mnorm * fnorm, 1e-300), "adjoint_iterations": adj.iterations,
        })
    return rows
