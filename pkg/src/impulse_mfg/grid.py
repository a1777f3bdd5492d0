"""Torus grids, periodic stencils, lattice shifts and the discrete adjoint pairing.

Conventions used by every solver in the package:

* A scalar field is a flat float64 array of length ``n**d`` (row-major over the
  spatial axes). A space-time field has shape ``(nt + 1, n**d)``; row ``k`` is
  time level ``t_k = k * dt``.
* Forward densities advance by fully implicit Euler. The step from level ``k``
  to ``k + 1`` is driven by data stored at level ``k`` (jump intensities,
  masks) and acts on ``m[k + 1]``.
* Backward value functions satisfy ``v[nt] = 0`` and the implicit backward
  operator at level ``i`` is ``(v[i] - v[i+1]) / dt - nu * Lap v[i]``. It is
  paired with ``m[i + 1]``, which makes the discrete Green identity exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from ._validation import GridMismatchError, check_scalar_field, check_spacetime_field


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid on ``(0, T) x T^d`` with ``n`` points per axis.

    Parameters
    ----------
    d : int
        Spatial dimension, 1 or 2.
    n : int
        Points per axis (``h = 1 / n``).
    T : float
        Time horizon.
    nt : int
        Number of time steps.
    nu : float
        Diffusion coefficient.
    """

    d: int = 1
    n: int = 32
    T: float = 1.0
    nt: int = 32
    nu: float = 0.1

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"d must be 1 or 2, got {self.d}")
        if int(self.n) != self.n or self.n < 4:
            raise ValueError(f"n must be an integer >= 4, got {self.n}")
        if int(self.nt) != self.nt or self.nt < 1:
            raise ValueError(f"nt must be an integer >= 1, got {self.nt}")
        if not (self.T > 0 and np.isfinite(self.T)):
            raise ValueError(f"T must be positive, got {self.T}")
        if not (self.nu > 0 and np.isfinite(self.nu)):
            raise ValueError(f"nu must be positive, got {self.nu}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "nt", int(self.nt))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "nu", float(self.nu))
        # exact rational check that the grid tiles the unit torus
        assert Fraction(1, self.n) * self.n == 1

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def dt(self):
        return self.T / self.nt

    @property
    def shape(self):
        return (self.n,) * self.d

    @property
    def size(self):
        return self.n**self.d

    @property
    def cell_volume(self):
        return self.h**self.d

    @property
    def times(self):
        return np.arange(self.nt + 1) * self.dt

    def coordinates(self):
        """Grid point coordinates, shape ``(n**d, d)``."""
        axes = np.meshgrid(*[np.arange(self.n) * self.h] * self.d, indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=1)

    def nearest_index(self, x):
        """Flat index of the grid point nearest to each row of ``x`` (torus-wrapped)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        idx = np.floor(np.mod(x, 1.0) * self.n + 0.5).astype(np.int64) % self.n
        flat = idx[:, 0]
        for axis in range(1, self.d):
            flat = flat * self.n + idx[:, axis]
        return flat

    def zeros(self, spacetime=False):
        if spacetime:
            return np.zeros((self.nt + 1, self.size))
        return np.zeros(self.size)

    def sample(self, func, spacetime=False):
        """Evaluate ``func(*coords)`` (or ``func(t, *coords)``) on the grid."""
        pts = self.coordinates()
        cols = [pts[:, a] for a in range(self.d)]
        if not spacetime:
            return np.asarray(np.broadcast_to(func(*cols), (self.size,)), dtype=np.float64).copy()
        out = np.empty((self.nt + 1, self.size))
        for k, t in enumerate(self.times):
            out[k] = np.broadcast_to(func(t, *cols), (self.size,))
        return out

    def with_(self, **changes):
        params = dict(d=self.d, n=self.n, T=self.T, nt=self.nt, nu=self.nu)
        params.update(changes)
        return TorusGrid(**params)

    @cached_property
    def laplacian_matrix(self):
        """Sparse periodic 5-point (2D) / 3-point (1D) Laplacian, CSR."""
        n = self.n
        one = sp.diags(
            [np.full(n, -2.0), np.ones(n - 1), np.ones(n - 1)], [0, 1, -1], shape=(n, n), format="lil"
        )
        one[0, n - 1] += 1.0
        one[n - 1, 0] += 1.0
        one = one.tocsr() / self.h**2
        if self.d == 1:
            return one.tocsr()
        eye = sp.identity(n, format="csr")
        return (sp.kron(one, eye) + sp.kron(eye, one)).tocsr()


@dataclass(frozen=True)
class LatticeJump:
    """Jump vector ``xi = h * offset`` with an integer offset per axis."""

    offset: tuple

    def __post_init__(self):
        off = tuple(int(o) for o in np.atleast_1d(self.offset))
        if len(off) == 0 or all(o == 0 for o in off):
            raise ValueError("jump offset must be a nonzero integer vector")
        object.__setattr__(self, "offset", off)

    def on(self, grid):
        """Return the jump reduced modulo ``n``; raises if it becomes zero."""
        if len(self.offset) != grid.d:
            raise GridMismatchError(f"jump {self.offset} has {len(self.offset)} components, grid has d={grid.d}")
        off = tuple(o % grid.n for o in self.offset)
        if all(o == 0 for o in off):
            raise ValueError(f"jump offset {self.offset} is zero modulo n={grid.n}")
        return off

    def vector(self, grid):
        return np.asarray(self.on(grid), dtype=np.float64) * grid.h

    def __neg__(self):
        return LatticeJump(tuple(-o for o in self.offset))


def _as_jump(xi):
    return xi if isinstance(xi, LatticeJump) else LatticeJump(xi)


def laplacian(f, grid):
    """Periodic second-order central difference Laplacian of a scalar field."""
    f = check_scalar_field(f, grid)
    u = f.reshape(grid.shape)
    out = np.zeros_like(u)
    for axis in range(grid.d):
        out += np.roll(u, 1, axis=axis) + np.roll(u, -1, axis=axis) - 2.0 * u
    return (out / grid.h**2).reshape(grid.size)


def shift(f, xi, grid):
    """Periodic translation: ``result[i] = f[i - offset]`` on every axis.

    Works on a scalar field or, row by row, on a space-time field.
    """
    off = _as_jump(xi).on(grid)
    arr = np.asarray(f, dtype=np.float64)
    lead = arr.shape[:-1]
    u = arr.reshape(lead + grid.shape)
    axes = tuple(range(len(lead), len(lead) + grid.d))
    return np.roll(u, off, axis=axes).reshape(lead + (grid.size,))


def shift_index(grid, xi):
    """Index map ``j(i)`` with ``shift(f, xi)[i] == f[j(i)]``."""
    return shift(np.arange(grid.size, dtype=np.float64), xi, grid).astype(np.int64)


def shift_matrix(grid, xi):
    """Permutation matrix ``S`` with ``S @ f == shift(f, xi)``."""
    src = shift_index(grid, xi)
    rows = np.arange(grid.size)
    return sp.csr_matrix((np.ones(grid.size), (rows, src)), shape=(grid.size, grid.size))


def integrate(f, grid):
    """Riemann sum ``h**d * sum(f)`` over the torus."""
    f = np.asarray(f, dtype=np.float64)
    return float(grid.cell_volume * np.sum(f, axis=-1)) if f.ndim == 1 else grid.cell_volume * np.sum(f, axis=-1)


def backward_operator(v, grid):
    """Implicit backward heat operator on levels ``0..nt-1``.

    Row ``i`` is ``(v[i] - v[i+1]) / dt - nu * Lap v[i]``; shape ``(nt, n**d)``.
    """
    v = check_spacetime_field(v, grid, "v")
    lap = (grid.laplacian_matrix @ v[:-1].T).T
    return (v[:-1] - v[1:]) / grid.dt - grid.nu * lap


def forward_residual(m, grid):
    """Implicit forward heat residual on steps ``k -> k+1``.

    Row ``k`` is ``(m[k+1] - m[k]) / dt - nu * Lap m[k+1]``; shape ``(nt, n**d)``.
    """
    m = check_spacetime_field(m, grid, "m")
    lap = (grid.laplacian_matrix @ m[1:].T).T
    return (m[1:] - m[:-1]) / grid.dt - grid.nu * lap


def adjoint_pairing(m, v, m0, grid):
    """Discrete ``int_0^T <-d_t v - nu Lap v, m> - int v(0) m0``.

    The backward operator at level ``i`` is paired with ``m[i+1]`` and the
    initial term uses ``v[0]``; for any ``v`` with ``v[nt] = 0`` this equals
    ``dt h^d sum_k <forward_residual(m)[k], v[k]>`` exactly (summation by
    parts), so densities produced by the implicit forward solvers see the
    pairing as their own weak form.
    """
    m = check_spacetime_field(m, grid, "m")
    v = check_spacetime_field(v, grid, "v")
    m0 = check_scalar_field(m0, grid, "m0")
    bv = backward_operator(v, grid)
    vol = grid.cell_volume
    return float(grid.dt * vol * np.sum(bv * m[1:]) - vol * np.dot(v[0], m0))


def pairing_coefficients(m, m0, grid):
    """Linear coefficients ``c`` with ``adjoint_pairing(m, v, m0) == sum(c * v[:nt])``.

    Valid for every ``v`` with ``v[nt] = 0``. Row ``k`` equals
    ``dt h^d forward_residual`` of ``m`` whose slice 0 is replaced by ``m0``.
    """
    m = check_spacetime_field(m, grid, "m").copy()
    m[0] = check_scalar_field(m0, grid, "m0")
    return grid.dt * grid.cell_volume * forward_residual(m, grid)
