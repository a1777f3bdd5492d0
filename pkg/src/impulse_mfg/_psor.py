"""Projected SOR kernel for ``A u <= b, u <= psi`` complementarity systems."""

import numpy as np
from numba import njit

SENTINEL = 1e30


@njit(cache=True)
def _sweep(indptr, indices, data, diag, b, psi, u, omega):
    n = u.shape[0]
    for i in range(n):
        s = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            s += data[p] * u[indices[p]]
        v = u[i] + omega * (b[i] - s) / diag[i]
        if psi[i] < SENTINEL and v > psi[i]:
            v = psi[i]
        u[i] = v


@njit(cache=True)
def _residual(indptr, indices, data, b, psi, u):
    n = u.shape[0]
    worst = 0.0
    for i in range(n):
        s = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            s += data[p] * u[indices[p]]
        r = b[i] - s
        if psi[i] < SENTINEL:
            g = psi[i] - u[i]
            r = min(r, g)
        if abs(r) > worst:
            worst = abs(r)
    return worst


@njit(cache=True)
def psor(indptr, indices, data, diag, b, psi, u, omega, tol, max_iter):
    """Run PSOR in place on ``u``; return ``(iterations, residual)``.

    The residual is ``max |min(psi - u, b - A u)|`` with the obstacle term
    dropped where ``psi`` carries the sentinel.
    """
    res = _residual(indptr, indices, data, b, psi, u)
    it = 0
    while res > tol and it < max_iter:
        for _ in range(4):
            _sweep(indptr, indices, data, diag, b, psi, u, omega)
        it += 4
        res = _residual(indptr, indices, data, b, psi, u)
    return it, res


def lcp_residual(A, b, psi, u):
    r = b - A @ u
    finite = psi < SENTINEL
    r = np.where(finite, np.minimum(r, psi - u), r)
    return float(np.max(np.abs(r))) if r.size else 0.0
