"""Sparse linear solves: direct LU on small grids, preconditioned Krylov above."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DIRECT_LIMIT = {1: 128, 2: 64}


class LinearSolveError(RuntimeError):
    """A linear system could not be solved to the requested residual."""


def use_direct(grid):
    return grid.n <= DIRECT_LIMIT[grid.d]


class SparseSolver:
    """Reusable solver for ``A x = b`` with a fixed matrix.

    Factorizes once with SuperLU when ``direct`` is true, otherwise runs
    BiCGSTAB with a Jacobi preconditioner (GMRES as fallback).
    """

    def __init__(self, A, direct=True, rtol=1e-12):
        self.A = sp.csc_matrix(A)
        self.direct = direct
        self.rtol = rtol
        if direct:
            try:
                self._lu = spla.splu(self.A)
            except RuntimeError as exc:
                raise LinearSolveError(f"sparse factorization failed: {exc}") from exc
        else:
            diag = self.A.diagonal()
            if np.any(diag == 0):
                raise LinearSolveError("zero diagonal entry; Jacobi preconditioner undefined")
            inv = 1.0 / diag
            self._M = spla.LinearOperator(self.A.shape, matvec=lambda x: inv * x)
            self._Acsr = self.A.tocsr()

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        if self.direct:
            x = self._lu.solve(b)
            if not np.all(np.isfinite(x)):
                raise LinearSolveError("direct solve produced non-finite values")
            return x
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros_like(b)
        x, info = spla.bicgstab(self._Acsr, b, rtol=self.rtol, atol=0.0, M=self._M, maxiter=5000)
        if info != 0 or np.linalg.norm(self._Acsr @ x - b) > 10 * self.rtol * bnorm:
            x, info = spla.gmres(self._Acsr, b, x0=x, rtol=self.rtol, atol=0.0, M=self._M, restart=100, maxiter=200)
        res = np.linalg.norm(self._Acsr @ x - b)
        if info != 0 and res > 10 * self.rtol * bnorm:
            raise LinearSolveError(f"iterative solve stalled, relative residual {res / bnorm:.3e}")
        return x


def solve_once(A, b, direct=True):
    return SparseSolver(A, direct=direct).solve(b)
