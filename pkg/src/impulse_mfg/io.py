"""Field serialization: binary dumps, CSV tables and JSON reports."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .grid import TorusGrid

_HEADER = struct.Struct("<QQQ")


def fmt(x):
    """Format a number with 17 significant digits (round-trip exact)."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def write_dump(path, values, grid):
    """Write a scalar or space-time field as a little-endian binary dump.

    Header is ``d, n, nt`` as uint64; ``nt`` is 0 for a scalar field.
    Payload is the row-major float64 array.
    """
    arr = np.ascontiguousarray(values, dtype="<f8")
    if arr.shape == (grid.size,):
        nt = 0
    elif arr.shape == (grid.nt + 1, grid.size):
        nt = grid.nt
    else:
        raise ValueError(f"cannot dump array of shape {arr.shape} on grid d={grid.d}, n={grid.n}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(grid.d, grid.n, nt))
        fh.write(arr.tobytes(order="C"))


def read_dump(path):
    """Return ``(d, n, nt, array)``; ``array`` is flat for scalar dumps."""
    raw = Path(path).read_bytes()
    d, n, nt = _HEADER.unpack_from(raw)
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    size = n**d
    if nt == 0:
        expected = (size,)
    else:
        expected = (nt + 1, size)
    if data.size != int(np.prod(expected)):
        raise ValueError(f"{path}: payload has {data.size} values, header implies {expected}")
    return int(d), int(n), int(nt), data.reshape(expected)


def write_field_csv(path, values, grid):
    """One row per grid point: index coordinates then value (scalar fields)."""
    values = np.asarray(values, dtype=np.float64).reshape(grid.size)
    idx = np.indices(grid.shape).reshape(grid.d, -1).T
    header = [f"i{a}" for a in range(grid.d)] + ["value"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row, v in zip(idx, values):
            w.writerow([*map(int, row), fmt(v)])


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) if isinstance(x, (int, float, np.number, bool, np.bool_)) else x for x in row])


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if np.isfinite(x):
            return x
        return None if np.isnan(x) else ("inf" if x > 0 else "-inf")
    return obj


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=False)
        fh.write("\n")


def grid_header(grid: TorusGrid):
    return {"d": grid.d, "n": grid.n, "nt": grid.nt, "T": grid.T, "nu": grid.nu}
