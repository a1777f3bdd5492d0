"""Monte-Carlo particle oracle for the jump diffusion on the torus.

Random numbers come from Philox keyed by ``(seed, substep)``; within one
substep particle ``p`` consumes uniforms ``p*(d+2) .. p*(d+2)+d+1`` of the
stream, so a shard starting at particle ``p`` can reproduce its numbers by
advancing the counter. Gaussian increments use the inverse normal CDF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from ._validation import check_mask, check_positive, check_scalar_field
from .grid import integrate

_MASK64 = (1 << 64) - 1


class OracleError(RuntimeError):
    """The particle scheme cannot represent the requested dynamics."""


def _uniforms(seed, counter, N, width):
    bitgen = np.random.Philox(key=np.array([seed & _MASK64, counter & _MASK64], dtype=np.uint64))
    return np.random.Generator(bitgen).random((N, width))


@dataclass
class ParticleEnsemble:
    positions: np.ndarray
    rng_seed: int
    N: int
    hist: np.ndarray
    jump_log: np.ndarray
    jumps_outside: int = 0
    substeps: int = 1
    max_jumps_per_step: int = 0
    mass: float = 1.0
    jump_counts: np.ndarray = field(default=None, repr=False)

    def density(self, grid, level=None):
        """Histogram rescaled to a grid density with the ensemble's total mass."""
        h = self.hist if level is None else self.hist[level]
        return h * (self.mass / (self.N * grid.cell_volume))


def _sample_initial(m0, grid, N, seed):
    m0 = check_scalar_field(m0, grid, "m0")
    if m0.min() < 0 or m0.sum() <= 0:
        raise ValueError("m0 must be nonnegative with positive mass")
    if N < 1:
        raise ValueError("N must be at least 1")
    U = _uniforms(seed, _MASK64, N, grid.d + 1)
    cdf = np.cumsum(m0) / m0.sum()
    cell = np.minimum(np.searchsorted(cdf, U[:, 0], side="right"), grid.size - 1)
    idx = np.stack(np.unravel_index(cell, grid.shape), axis=1)
    x = (idx + U[:, 1:] - 0.5) * grid.h
    return np.mod(x, 1.0), float(integrate(m0, grid))


def _histogram(x, grid):
    return np.bincount(grid.nearest_index(x), minlength=grid.size)


def simulate_penalized(m0, js, epsilon, grid, N, seed, max_substeps=4096, max_rate_dt=0.2):
    """Particles diffuse and, inside ``A_xi``, jump by ``xi`` at rate ``V(xi)/eps``.

    Intensities at level ``k`` act during ``(t_k, t_{k+1}]``. Per substep a
    particle first runs an exponential race between the jump clocks of its
    cell, then takes an Euler-Maruyama Brownian step.
    """
    epsilon = check_positive(epsilon, "epsilon")
    seed = int(seed)
    x, mass = _sample_initial(m0, grid, N, seed)
    K = js.n_jumps
    V = js.intensity if js.intensity is not None else np.zeros((K, grid.size))
    if V.ndim == 2:
        V = np.broadcast_to(V[:, None, :], (K, grid.nt + 1, grid.size))
    max_rate = float(V.sum(axis=0).max()) / epsilon
    nsub = max(1, math.ceil(max_rate * grid.dt / max_rate_dt))
    if nsub > max_substeps:
        raise OracleError(f"rate*dt = {max_rate * grid.dt:.3g} needs {nsub} substeps (> {max_substeps})")
    dts = grid.dt / nsub
    sigma = math.sqrt(2.0 * grid.nu * dts)
    vec = np.stack([j.vector(grid) for j in js.jumps])
    hist = np.zeros((grid.nt + 1, grid.size), dtype=np.int64)
    hist[0] = _histogram(x, grid)
    log = np.zeros((grid.nt, K), dtype=np.int64)
    outside = 0
    max_jumps = 0
    counter = 0
    for k in range(grid.nt):
        Vk = V[:, k]
        total = Vk.sum(axis=0) / epsilon
        cumV = np.cumsum(Vk, axis=0)
        jumps_this_step = np.zeros(N, dtype=np.int64)
        for _ in range(nsub):
            U = _uniforms(seed, counter, N, grid.d + 2)
            counter += 1
            cell = grid.nearest_index(x)
            rate = total[cell]
            with np.errstate(divide="ignore"):
                tau = -np.log(U[:, grid.d]) / np.where(rate > 0, rate, 1.0)
            fire = (rate > 0) & (tau < dts)
            if fire.any():
                c = cell[fire]
                pick = U[fire, grid.d + 1] * cumV[-1, c]
                j = np.argmax(cumV[:, c] > pick[None], axis=0)
                outside += int(np.sum(Vk[j, c] <= 0))
                x[fire] = np.mod(x[fire] + vec[j], 1.0)
                np.add.at(log[k], j, 1)
                jumps_this_step[fire] += 1
            x = np.mod(x + sigma * ndtri(U[:, : grid.d]), 1.0)
        max_jumps = max(max_jumps, int(jumps_this_step.max()))
        hist[k + 1] = _histogram(x, grid)
    return ParticleEnsemble(positions=x, rng_seed=seed, N=N, hist=hist, jump_log=log, jumps_outside=outside,
                            substeps=nsub, max_jumps_per_step=max_jumps, mass=mass)


def iterated_jump_count(A_mask, xi, grid):
    """``n(x)``: smallest ``p`` with ``x + p xi`` outside ``A`` (0 off ``A``).

    Raises :class:`OracleError` when a chain cycles inside ``A``.
    """
    from .grid import LatticeJump, shift_index

    A = check_mask(A_mask, grid, "A", spacetime=False)
    xi = xi if isinstance(xi, LatticeJump) else LatticeJump(xi)
    dest = shift_index(grid, -xi)
    n = np.zeros(grid.size, dtype=np.int64)
    cur = np.arange(grid.size)
    inside = A[cur]
    p = 0
    while inside.any():
        p += 1
        if p > grid.size:
            raise OracleError("hypothesis violated: the jump chain cycles inside A")
        cur = np.where(inside, dest[cur], cur)
        n[inside] += 1
        inside = inside & A[cur]
    return n


def simulate_limit(m0, A_mask, xi, grid, N, seed, substeps=None):
    """Diffusion with instantaneous iterated jumps ``n(x) xi`` on entering ``A``.

    ``A_mask`` is static. Level-0 histograms record the initial sample; the
    first jump of particles that start in ``A`` happens at the start of the
    first substep.
    """
    from .grid import LatticeJump

    seed = int(seed)
    xi = xi if isinstance(xi, LatticeJump) else LatticeJump(xi)
    A = check_mask(A_mask, grid, "A", spacetime=False)
    nx = iterated_jump_count(A, xi, grid)
    x, mass = _sample_initial(m0, grid, N, seed)
    if substeps is None:
        substeps = max(1, math.ceil(2.0 * grid.nu * grid.dt / (0.5 * grid.h) ** 2))
    dts = grid.dt / substeps
    sigma = math.sqrt(2.0 * grid.nu * dts)
    vec = xi.vector(grid)
    hist = np.zeros((grid.nt + 1, grid.size), dtype=np.int64)
    hist[0] = _histogram(x, grid)
    log = np.zeros((grid.nt, 1), dtype=np.int64)
    counter = 0
    for k in range(grid.nt):
        for _ in range(substeps):
            cell = grid.nearest_index(x)
            p = nx[cell]
            hit = p > 0
            if hit.any():
                x[hit] = np.mod(x[hit] + p[hit, None] * vec, 1.0)
                log[k, 0] += int(p[hit].sum())
            U = _uniforms(seed, counter, N, grid.d)
            counter += 1
            x = np.mod(x + sigma * ndtri(U), 1.0)
        cell = grid.nearest_index(x)
        p = nx[cell]
        hit = p > 0
        if hit.any():
            x[hit] = np.mod(x[hit] + p[hit, None] * vec, 1.0)
            log[k, 0] += int(p[hit].sum())
        hist[k + 1] = _histogram(x, grid)
    return ParticleEnsemble(positions=x, rng_seed=seed, N=N, hist=hist, jump_log=log, substeps=substeps, mass=mass)


def l1_distance(m_pde, ensemble, grid, level=-1):
    """``h^d sum |m_pde - density|`` at one time level after matching total mass."""
    ref = np.asarray(m_pde, dtype=np.float64)
    if ref.ndim == 2:
        ref = ref[level]
    emp = ensemble.density(grid, level)
    mass = integrate(ref, grid)
    emp = emp * (mass / max(integrate(emp, grid), 1e-300))
    return float(grid.cell_volume * np.sum(np.abs(ref - emp)))
