"""Input validation helpers shared by the solvers and estimators."""

from __future__ import annotations

import numpy as np


class GridMismatchError(ValueError):
    """A field does not live on the grid it was paired with."""


def check_scalar_field(values, grid, name="field"):
    """Return ``values`` as a flat float64 array of length ``grid.size``.

    Accepts either a flat array or one shaped like ``grid.shape``.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape == grid.shape:
        arr = arr.reshape(grid.size)
    if arr.shape != (grid.size,):
        raise GridMismatchError(
            f"{name}: expected {grid.size} values for a {grid.d}D grid with "
            f"n={grid.n}, got shape {np.shape(values)}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: entries must be finite")
    return arr


def check_spacetime_field(values, grid, name="field"):
    """Return ``values`` as a float64 array of shape ``(nt + 1, grid.size)``."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == grid.d + 1 and arr.shape[1:] == grid.shape:
        arr = arr.reshape(arr.shape[0], grid.size)
    if arr.shape != (grid.nt + 1, grid.size):
        raise GridMismatchError(
            f"{name}: expected shape {(grid.nt + 1, grid.size)}, got {np.shape(values)}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: entries must be finite")
    return arr


def check_mask(mask, grid, name="mask", spacetime=True):
    arr = np.asarray(mask)
    if arr.dtype != bool:
        if not np.all(np.isin(arr, (0, 1))):
            raise ValueError(f"{name}: mask entries must be boolean")
        arr = arr.astype(bool)
    if spacetime:
        if arr.shape == (grid.size,) or arr.shape == grid.shape:
            arr = np.broadcast_to(arr.reshape(grid.size), (grid.nt + 1, grid.size))
        elif arr.ndim == grid.d + 1 and arr.shape[1:] == grid.shape:
            arr = arr.reshape(arr.shape[0], grid.size)
        if arr.shape != (grid.nt + 1, grid.size):
            raise GridMismatchError(
                f"{name}: expected shape {(grid.nt + 1, grid.size)}, got {np.shape(mask)}"
            )
    else:
        if arr.shape == grid.shape:
            arr = arr.reshape(grid.size)
        if arr.shape != (grid.size,):
            raise GridMismatchError(f"{name}: expected {grid.size} entries, got {np.shape(mask)}")
    return np.ascontiguousarray(arr)


def check_positive(value, name):
    value = float(value)
    if not value > 0 or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite positive number, got {value}")
    return value


def check_nonnegative_field(arr, name, atol=0.0):
    if np.min(arr) < -atol:
        raise ValueError(f"{name} must be nonnegative (min {np.min(arr):.3e})")
    return arr
