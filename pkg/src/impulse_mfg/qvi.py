"""Jump operator, obstacle steps and quasi-variational inequality solvers.

The backward value function ``u`` solves, on levels ``0..nt-1``,

    min(Mu - u, f - B u) = 0,    u[nt] = 0,

with ``B u[i] = (u[i] - u[i+1]) / dt - nu Lap u[i]`` and
``Mu(x) = min_xi k(x, xi) + u(x + xi)``. Source slot ``f[i]`` is the running
cost on the step ``(t_i, t_{i+1}]``; slot ``f[nt]`` is never read.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ._linalg import LinearSolveError, SparseSolver, use_direct
from ._psor import SENTINEL, lcp_residual, psor
from ._validation import check_mask, check_positive, check_scalar_field, check_spacetime_field
from .grid import LatticeJump, TorusGrid, shift, shift_index


class ConvergenceError(RuntimeError):
    """An iteration stopped before reaching its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class HypothesisViolation(ValueError):
    """The jump sets admit chains that never leave them."""


@dataclass
class JumpSystem:
    """Jump set ``K``, costs ``k(., xi)`` and optional intensities ``V(xi, ., .)``.

    ``cost`` has shape ``(len(K), n**d)``. ``intensity`` has shape
    ``(len(K), nt + 1, n**d)`` for time-dependent problems or
    ``(len(K), n**d)`` for stationary ones.
    """

    grid: TorusGrid
    jumps: list
    cost: np.ndarray
    k0: float
    intensity: np.ndarray | None = None

    def __post_init__(self):
        if len(self.jumps) == 0:
            raise ValueError("jump set K is empty")
        self.jumps = [j if isinstance(j, LatticeJump) else LatticeJump(j) for j in self.jumps]
        for j in self.jumps:
            j.on(self.grid)
        K, g = len(self.jumps), self.grid
        cost = np.asarray(self.cost, dtype=np.float64)
        if cost.ndim == 0:
            cost = np.full((K, g.size), float(cost))
        elif cost.shape == (g.size,) or cost.shape == g.shape:
            cost = np.broadcast_to(cost.reshape(g.size), (K, g.size)).copy()
        cost = cost.reshape(K, -1)
        if cost.shape != (K, g.size):
            raise ValueError(f"cost: expected shape {(K, g.size)}, got {np.shape(self.cost)}")
        self.k0 = check_positive(self.k0, "k0")
        if not np.all(np.isfinite(cost)) or cost.min() < self.k0 * (1 - 1e-14):
            raise ValueError(f"cost must be finite and >= k0={self.k0} (min {cost.min():.6g})")
        self.cost = cost
        if self.intensity is not None:
            V = np.asarray(self.intensity, dtype=np.float64)
            if V.shape == (K, g.size) or V.shape == (K, g.nt + 1, g.size):
                pass
            elif V.shape == (K,) + g.shape:
                V = V.reshape(K, g.size)
            elif V.shape == (K, g.nt + 1) + g.shape:
                V = V.reshape(K, g.nt + 1, g.size)
            else:
                raise ValueError(f"intensity: unexpected shape {V.shape}")
            if not np.all(np.isfinite(V)) or V.min() < 0 or V.max() > 1:
                raise ValueError("intensity V must take values in [0, 1]")
            if np.max(V.sum(axis=0)) > 1 + 1e-12:
                raise ValueError("intensity violates sum_xi V(xi) <= 1")
            self.intensity = V

    @classmethod
    def single(cls, grid, jump, k0, mask=None, cost=None):
        """One jump with constant cost ``k0`` (or a field) and ``V = 1_A``."""
        V = None
        if mask is not None:
            m = np.asarray(mask, dtype=bool)
            m = check_mask(m, grid, spacetime=m.size != grid.size) if m.size != grid.size else m.reshape(grid.size)
            V = m.astype(np.float64)[None]
        return cls(grid, [jump], k0 if cost is None else cost, k0, V)

    @property
    def n_jumps(self):
        return len(self.jumps)

    @property
    def stationary(self):
        return self.intensity is not None and self.intensity.ndim == 2

    @property
    def k_star(self):
        """Pointwise minimum jump cost."""
        return self.cost.min(axis=0)

    def jump_masks(self):
        """Boolean masks ``A_xi``; shape matches ``intensity``."""
        if self.intensity is None:
            raise ValueError("jump system has no intensity")
        return self.intensity > 0

    def jump_set(self):
        """Union mask ``A``."""
        return self.jump_masks().any(axis=0)

    def with_intensity(self, intensity):
        return JumpSystem(self.grid, list(self.jumps), self.cost.copy(), self.k0, intensity)


def apply_M(js, u):
    """Return ``(Mu, argmin)`` for a scalar or space-time field ``u``.

    Ties go to the lowest jump index.
    """
    u = np.asarray(u, dtype=np.float64)
    cand = np.stack([js.cost[j] + shift(u, -js.jumps[j], js.grid) for j in range(js.n_jumps)])
    arg = np.argmin(cand, axis=0)
    return np.take_along_axis(cand, arg[None], axis=0)[0], arg


@dataclass
class QviSolution:
    u: np.ndarray
    active: np.ndarray
    pde_residual: np.ndarray
    outer_iterations: int
    monotone: bool
    complementarity: float = 0.0
    feasibility: float = 0.0
    max_increase: float = 0.0
    history: list = field(default_factory=list)

    def summary(self):
        return {
            "outer_iterations": self.outer_iterations,
            "monotone": self.monotone,
            "complementarity_residual": self.complementarity,
            "feasibility_violation": self.feasibility,
            "max_outer_increase": self.max_increase,
            "active_fraction": float(np.mean(self.active)),
        }


def _lcp_solve(A_csr, diag, solver_cache, b, psi, u0, omega, tol, max_iter, polish=True):
    """Projected SOR followed by an exact active-set polish."""
    u = np.array(u0, dtype=np.float64, copy=True)
    finite = psi < SENTINEL
    if not finite.any():
        return solver_cache.full().solve(b)
    u = np.minimum(u, psi)
    it, res = psor(A_csr.indptr, A_csr.indices, A_csr.data, diag, b, psi, u, omega, tol, max_iter)
    if res > tol and not polish:
        raise ConvergenceError(f"PSOR did not converge, residual {res:.3e}", res, it)
    if polish:
        u = _howard(A_csr, solver_cache, b, psi, u, finite)
        res = lcp_residual(A_csr, b, psi, u)
        if res > tol:
            raise ConvergenceError(f"obstacle step did not converge, residual {res:.3e}", res, it)
    return u


def _howard(A_csr, cache, b, psi, u, finite, max_iter=100):
    """Policy iteration on ``min(psi - u, b - A u) = 0``; exact for M-matrices."""
    prev = None
    for _ in range(max_iter):
        active = finite & (psi - u < b - A_csr @ u)
        key = active.tobytes()
        if key == prev:
            break
        prev = key
        u = cache.with_fixed(active).solve_fixed(b, psi, active)
    return u


class _StepCache:
    """Factorizations of ``A`` with rows fixed to the identity on a set."""

    def __init__(self, A, direct):
        self.A = sp.csr_matrix(A)
        self.direct = direct
        self._full = None
        self._fixed = {}

    def full(self):
        if self._full is None:
            self._full = SparseSolver(self.A, direct=self.direct)
        return self._full

    def with_fixed(self, active):
        key = active.tobytes()
        if key not in self._fixed:
            if len(self._fixed) > 64:
                self._fixed.clear()
            keep = sp.diags((~active).astype(np.float64))
            fix = sp.diags(active.astype(np.float64))
            self._fixed[key] = SparseSolver(keep @ self.A + fix, direct=self.direct)
        self._current = self._fixed[key]
        return self

    def solve_fixed(self, b, psi, active):
        rhs = np.where(active, psi, b)
        return self._current.solve(rhs)


def _heat_matrix(grid):
    return (sp.identity(grid.size, format="csr") / grid.dt - grid.nu * grid.laplacian_matrix).tocsr()


def solve_obstacle_step(f_slice, u_next, obstacle, grid, omega=1.5, tol=1e-11, max_iter=200000, _cache=None):
    """One backward implicit step of the obstacle problem with a frozen obstacle.

    Solves ``(u_next - u)/dt - nu Lap u <= f``, ``u <= obstacle`` with equality
    in at least one relation at every point. Entries of ``obstacle`` equal to
    or above ``1e30`` are unconstrained.
    """
    f_slice = check_scalar_field(f_slice, grid, "f_slice")
    u_next = check_scalar_field(u_next, grid, "u_next")
    psi = np.asarray(obstacle, dtype=np.float64).reshape(grid.size)
    if np.any(np.isnan(psi)):
        raise ValueError("obstacle contains NaN")
    psi = np.minimum(psi, SENTINEL)
    cache = _cache or _StepCache(_heat_matrix(grid), use_direct(grid))
    A = cache.A
    b = f_slice + u_next / grid.dt
    scale = max(1.0, float(np.max(np.abs(b))))
    return _lcp_solve(A, A.diagonal(), cache, b, psi, u_next, omega, tol * scale, max_iter)


def backward_heat(f, grid, terminal=None):
    """Unconstrained backward implicit heat solve with source ``f`` and ``u[nt] = terminal``."""
    f = check_spacetime_field(f, grid, "f")
    solver = SparseSolver(_heat_matrix(grid), direct=use_direct(grid))
    u = np.zeros((grid.nt + 1, grid.size))
    if terminal is not None:
        u[-1] = check_scalar_field(terminal, grid, "terminal")
    for i in range(grid.nt - 1, -1, -1):
        u[i] = solver.solve(f[i] + u[i + 1] / grid.dt)
    return u


def backward_residual(u, f, grid):
    """``B u - f`` on levels ``0..nt-1`` with a zero last row."""
    from .grid import backward_operator

    out = np.zeros((grid.nt + 1, grid.size))
    out[:-1] = backward_operator(u, grid) - f[:-1]
    return out


def _check_lower_bound(f, lower_bound):
    if lower_bound is not None and np.min(f) < -lower_bound:
        raise ValueError(f"source is not bounded below by -{lower_bound} (min {np.min(f):.6g})")


def solve_qvi(
    js,
    f,
    grid=None,
    omega=1.5,
    tol_pde=1e-11,
    tol_outer=1e-11,
    max_outer=500,
    max_psor_iters=200000,
    lower_bound=1e12,
    tol_active=None,
    u_init=None,
):
    """Decreasing outer iteration of obstacle problems with frozen obstacle ``M u^n``.

    ``u^0`` is the unconstrained backward heat solution (obstacle at the
    sentinel). ``u_init`` may supply a supersolution to start from instead.
    """
    grid = grid or js.grid
    f = check_spacetime_field(f, grid, "f")
    _check_lower_bound(f, lower_bound)
    cache = _StepCache(_heat_matrix(grid), use_direct(grid))
    A = cache.A
    diag = A.diagonal()
    scale = max(1.0, float(np.max(np.abs(f[:-1]))), 1.0 / grid.dt)

    def sweep(obstacle):
        u = np.zeros((grid.nt + 1, grid.size))
        for i in range(grid.nt - 1, -1, -1):
            b = f[i] + u[i + 1] / grid.dt
            s = max(scale, float(np.max(np.abs(b))))
            u[i] = _lcp_solve(A, diag, cache, b, obstacle[i], u[i + 1], omega, tol_pde * s, max_psor_iters)
        return u

    if u_init is None:
        u = sweep(np.full((grid.nt + 1, grid.size), SENTINEL))
    else:
        u = check_spacetime_field(u_init, grid, "u_init").copy()
    monotone = True
    max_inc = 0.0
    history = []
    it = 0
    for it in range(1, max_outer + 1):
        Mu, _ = apply_M(js, u)
        new = sweep(Mu)
        inc = float(np.max(new - u))
        max_inc = max(max_inc, inc)
        if inc > tol_outer:
            monotone = False
        change = float(np.max(np.abs(new - u)))
        history.append(change)
        u = new
        if change <= tol_outer:
            break
    else:
        raise ConvergenceError(f"QVI outer loop did not converge in {max_outer} iterations (last change {change:.3e})",
                               change, max_outer)
    return _finalize(js, u, f, grid, it, monotone, max_inc, history, tol_active)


def _finalize(js, u, f, grid, it, monotone, max_inc, history, tol_active):
    Mu, _ = apply_M(js, u)
    if tol_active is None:
        tol_active = 1e-6 * (1.0 + float(np.max(np.abs(u))))
    active = np.zeros_like(u, dtype=bool)
    active[:-1] = u[:-1] >= Mu[:-1] - tol_active
    res = backward_residual(u, f, grid)
    comp = np.minimum(Mu[:-1] - u[:-1], -res[:-1])
    pde = np.where(active, 0.0, res)
    return QviSolution(
        u=u,
        active=active,
        pde_residual=pde,
        outer_iterations=it,
        monotone=monotone,
        complementarity=float(np.max(np.abs(comp))),
        feasibility=float(max(0.0, np.max(u - Mu))),
        max_increase=max_inc,
        history=history,
    )


def qvi_residuals(js, u, f, grid):
    """``(complementarity, feasibility violation)`` of a candidate solution."""
    f = check_spacetime_field(f, grid, "f")
    Mu, _ = apply_M(js, u)
    res = backward_residual(u, f, grid)
    comp = np.minimum(Mu[:-1] - u[:-1], -res[:-1])
    return float(np.max(np.abs(comp))), float(max(0.0, np.max(u - Mu)))


def solve_stationary_qvi(
    js, f, lam, grid=None, omega=1.5, tol_pde=1e-11, tol_outer=1e-11, max_outer=500, max_psor_iters=200000,
    lower_bound=1e12, tol_active=None,
):
    """Stationary QVI ``min(Mu - u, f + nu Lap u - lam u) = 0``.

    Returns ``(u, active, info)``.
    """
    grid = grid or js.grid
    f = check_scalar_field(f, grid, "f")
    lam = check_positive(lam, "lambda")
    _check_lower_bound(f, lower_bound)
    A = (lam * sp.identity(grid.size, format="csr") - grid.nu * grid.laplacian_matrix).tocsr()
    cache = _StepCache(A, use_direct(grid))
    diag = A.diagonal()
    tol = tol_pde * max(1.0, float(np.max(np.abs(f))))
    u = cache.full().solve(f)
    monotone, max_inc, change = True, 0.0, np.inf
    for it in range(1, max_outer + 1):
        Mu, _ = apply_M(js, u)
        new = _lcp_solve(A, diag, cache, f, Mu, u, omega, tol, max_psor_iters)
        inc = float(np.max(new - u))
        max_inc = max(max_inc, inc)
        monotone &= inc <= tol_outer
        change = float(np.max(np.abs(new - u)))
        u = new
        if change <= tol_outer:
            break
    else:
        raise ConvergenceError(f"stationary QVI did not converge (last change {change:.3e})", change, max_outer)
    Mu, _ = apply_M(js, u)
    if tol_active is None:
        tol_active = 1e-6 * (1.0 + float(np.max(np.abs(u))))
    active = u >= Mu - tol_active
    r = f - A @ u
    comp = float(np.max(np.abs(np.minimum(Mu - u, r))))
    info = {
        "outer_iterations": it,
        "monotone": bool(monotone),
        "max_outer_increase": max_inc,
        "complementarity_residual": comp,
        "feasibility_violation": float(max(0.0, np.max(u - Mu))),
    }
    return u, active, info


@dataclass
class ConstrainedSolution:
    u: np.ndarray
    heat_residual: float
    jump_residual: float
    separation_margin: float
    feasibility_margin: float
    separated: bool


def _jump_targets(js, masks, level=None):
    """Per point: the index it is tied to (or -1) and the jump index used."""
    g = js.grid
    target = np.full(g.size, -1, dtype=np.int64)
    which = np.full(g.size, -1, dtype=np.int64)
    for j, jump in enumerate(js.jumps):
        Aj = masks[j] if level is None else masks[j, level]
        if np.any(Aj & (which >= 0)):
            raise HypothesisViolation("jump sets overlap: the equality construction needs disjoint A_xi")
        dest = shift_index(g, -jump)
        target[Aj] = dest[Aj]
        which[Aj] = j
    return target, which


def _check_chains(target):
    """Raise if following ``x -> target[x]`` from some point never leaves the set."""
    n = target.size
    state = np.zeros(n, dtype=np.int8)  # 0 unvisited, 1 on stack, 2 exits
    for start in np.nonzero(target >= 0)[0]:
        if state[start]:
            continue
        path = []
        x = start
        while x >= 0 and state[x] == 0:
            state[x] = 1
            path.append(x)
            x = target[x]
        if x >= 0 and state[x] == 1:
            raise HypothesisViolation(
                "hypothesis violated: a jump chain cycles inside the jump set and never exits"
            )
        for p in path:
            state[p] = 2


def equality_matrix(js, level_mask, grid, heat_rows):
    """System matrix whose rows are jump equalities on ``A`` and ``heat_rows`` elsewhere."""
    target, which = _jump_targets(js, level_mask)
    _check_chains(target)
    inA = target >= 0
    idx = np.nonzero(inA)[0]
    J = sp.csr_matrix(
        (np.r_[np.ones(idx.size), -np.ones(idx.size)], (np.r_[idx, idx], np.r_[idx, target[idx]])),
        shape=(grid.size, grid.size),
    )
    off = sp.diags((~inA).astype(np.float64))
    return (off @ heat_rows + J).tocsr(), inA, which


def solve_constrained_equality(js, f, grid=None, tol_pde=1e-8):
    """Backward solve with ``u = k + u(. + xi)`` on ``A_xi`` and the heat equation off ``A``.

    Mask slice ``i`` governs level ``i``. Raises :class:`HypothesisViolation`
    when a chain of jumps cycles inside ``A`` or when jump sets overlap.
    """
    grid = grid or js.grid
    if js.intensity is None:
        raise ValueError("solve_constrained_equality needs a jump system with intensity")
    f = check_spacetime_field(f, grid, "f")
    masks = js.jump_masks()
    if masks.ndim == 2:
        masks = np.broadcast_to(masks[:, None, :], (js.n_jumps, grid.nt + 1, grid.size))
    H = _heat_matrix(grid)
    direct = use_direct(grid)
    u = np.zeros((grid.nt + 1, grid.size))
    cache = {}
    for i in range(grid.nt - 1, -1, -1):
        key = masks[:, i].tobytes()
        if key not in cache:
            Mi, inA, which = equality_matrix(js, masks[:, i], grid, H)
            try:
                cache[key] = (SparseSolver(Mi, direct=direct), inA, which)
            except LinearSolveError as exc:
                raise HypothesisViolation(f"hypothesis violated: singular elimination ({exc})") from exc
        solver, inA, which = cache[key]
        kvals = np.zeros(grid.size)
        kvals[inA] = js.cost[which[inA], np.nonzero(inA)[0]]
        rhs = np.where(inA, kvals, f[i] + u[i + 1] / grid.dt)
        u[i] = solver.solve(rhs)
    return _constrained_report(js, u, f, masks, grid, tol_pde)


def _constrained_report(js, u, f, masks, grid, tol_pde):
    A = masks.any(axis=0)
    res = backward_residual(u, f, grid)
    off = ~A[:-1]
    heat = float(np.max(np.abs(res[:-1][off]))) if off.any() else 0.0
    jump_res, sep = 0.0, np.inf
    cand = np.stack([js.cost[j] + shift(u, -js.jumps[j], grid) - u for j in range(js.n_jumps)])
    for j in range(js.n_jumps):
        Aj = masks[j, :-1]
        if Aj.any():
            jump_res = max(jump_res, float(np.max(np.abs(cand[j, :-1][Aj]))))
            for jj in range(js.n_jumps):
                if jj != j:
                    sep = min(sep, float(np.min(cand[jj, :-1][Aj])))
    gap = cand.min(axis=0)[:-1]
    feas = float(np.min(gap[A[:-1]])) if A[:-1].any() else np.inf
    scale = max(1.0, float(np.max(np.abs(u))))
    if heat > tol_pde * scale * max(1.0, 1.0 / grid.dt) or jump_res > tol_pde * scale:
        raise ConvergenceError(f"equality construction residuals too large (heat {heat:.3e}, jump {jump_res:.3e})")
    return ConstrainedSolution(
        u=u,
        heat_residual=heat,
        jump_residual=jump_res,
        separation_margin=sep,
        feasibility_margin=feas,
        separated=bool(sep > 0),
    )
