"""TOML experiment configuration: parsing, validation and field construction.

A config has the blocks ``[grid]``, ``[problem]``, ``[[jumps]]``,
``[initial]``, ``[source]``, ``[coupling]``, ``[numerics]`` and ``[output]``.
Fields (initial data, sources, costs, backgrounds) are given by a small
expression table, for instance ``{kind = "gaussian", base = 1.0,
amplitude = 0.5, center = [0.3], width = 0.1}``, or by a binary dump file.
Jump regions are unions of axis-aligned boxes in torus coordinates with an
optional time window::

    [[jumps]]
    offset = [16]          # lattice units; or displacement = [0.5] in torus units
    cost = 1.0
    regions = [{lower = [0.25], upper = [0.5], t_start = 0.0, t_end = 1.0}]

A box with ``lower > upper`` on some axis wraps around the torus.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .grid import LatticeJump, TorusGrid
from .io import read_dump
from .qvi import JumpSystem

SCENARIOS = (
    "fp_single", "fp_multi", "fp_stationary", "qvi", "mfg", "mfg_stationary", "optimal_control", "oracle_compare",
)
FIELD_KINDS = ("constant", "uniform", "cosine", "gaussian", "file")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


_DEFAULT_NUMERICS = {
    "epsilon": 1e-3,
    "ladder": [],
    "seed": 0,
    "omega": 1.5,
    "tol_pde": 1e-11,
    "tol_outer": 1e-11,
    "max_outer": 500,
    "tol_fixed": 1e-11,
    "max_fixed": 300,
    "theta": "corrective",
    "n_particles": 100000,
    "delta": 1.0,
    "lambda": 1.0,
    "battery": 20,
    "lower_bound": 1e12,
    "threshold": 1e-2,
    "probe": 0,
    "probe_ladders": [[1e-3, 1e-4, 1e-5, 1e-6], [1e-2, 1e-4, 1e-6, 1e-7]],
}


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``raw`` keeps the parsed TOML tables."""

    grid: TorusGrid
    scenario: str
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)
    numerics: dict = field(default_factory=dict)
    output_dir: Path = None

    @property
    def stationary(self):
        return self.scenario in ("fp_stationary", "mfg_stationary", "optimal_control")

    @property
    def seed(self):
        return int(self.numerics["seed"])

    def jump_system(self, with_intensity=True, stationary=False):
        return build_jump_system(self, with_intensity=with_intensity, stationary=stationary)

    def field(self, block, default=None, spacetime=False):
        expr = self.raw.get(block, default)
        if expr is None:
            raise ConfigError(f"missing [{block}] block")
        return build_field(expr, self.grid, self.base_dir, spacetime=spacetime, name=block)

    def with_value(self, param, value):
        """Copy with one sweep parameter replaced (``epsilon``, ``n``, ``nt``, ``N`` or ``theta``)."""
        raw = copy.deepcopy(self.raw)
        try:
            if param in ("n", "nt"):
                raw["grid"][param] = int(value)
            elif param == "epsilon":
                raw.setdefault("numerics", {})["epsilon"] = float(value)
                raw["numerics"].pop("ladder", None)
            elif param == "N":
                raw.setdefault("numerics", {})["n_particles"] = int(float(value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sweep value {value!r} is not valid for {param}") from exc
        if param in ("n", "nt", "epsilon", "N"):
            pass
        elif param == "theta":
            try:
                value = float(value)
            except (TypeError, ValueError):
                pass
            raw.setdefault("numerics", {})["theta"] = value
        else:
            raise ConfigError(f"sweep parameter must be one of epsilon, n, nt, N, theta (got {param!r})")
        return from_dict(raw, self.base_dir)


def load_config(path):
    """Parse and validate a TOML config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    return from_dict(raw, path.parent)


def from_dict(raw, base_dir=None):
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    g = raw.get("grid")
    if not isinstance(g, dict):
        raise ConfigError("missing [grid] block")
    try:
        grid = TorusGrid(d=int(g.get("d", 1)), n=int(g["n"]), T=float(g.get("T", 1.0)), nt=int(g["nt"]),
                         nu=float(g.get("nu", 0.02)))
    except KeyError as exc:
        raise ConfigError(f"[grid] is missing {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[grid]: {exc}") from exc
    scenario = raw.get("problem", {}).get("scenario")
    if scenario not in SCENARIOS:
        raise ConfigError(f"[problem] scenario must be one of {', '.join(SCENARIOS)} (got {scenario!r})")
    numerics = dict(_DEFAULT_NUMERICS)
    numerics.update(raw.get("numerics", {}))
    _validate_numerics(numerics)
    out = raw.get("output", {}).get("dir")
    cfg = ExperimentConfig(grid=grid, scenario=scenario, raw=raw, base_dir=base_dir, numerics=numerics,
                           output_dir=None if out is None else (base_dir / out))
    # Building the jump system checks offsets, costs, regions and files up front.
    build_jump_system(cfg, stationary=cfg.stationary)
    for block in ("initial", "source"):
        if block in raw:
            build_field(raw[block], grid, base_dir, spacetime=block == "source", name=block)
    if "coupling" in raw:
        _coupling_kwargs(cfg)
    return cfg


def _validate_numerics(num):
    for key in ("epsilon", "tol_pde", "tol_outer", "tol_fixed", "delta", "lambda", "omega", "threshold"):
        try:
            val = float(num[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[numerics] {key} must be a number") from exc
        if not val > 0:
            raise ConfigError(f"[numerics] {key} must be positive (got {num[key]!r})")
    if not 0 < float(num["omega"]) < 2:
        raise ConfigError("[numerics] omega must lie in (0, 2)")
    ladder = num["ladder"]
    if ladder:
        arr = np.asarray(ladder, dtype=np.float64)
        if arr.ndim != 1 or np.any(arr <= 0) or np.any(np.diff(arr) >= 0):
            raise ConfigError("[numerics] ladder must be strictly decreasing and positive")
    ladders = num["probe_ladders"]
    if not (isinstance(ladders, list) and len(ladders) == 2):
        raise ConfigError("[numerics] probe_ladders must hold exactly two ladders")
    for lad in ladders:
        arr = np.asarray(lad, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2 or np.any(arr <= 0) or np.any(np.diff(arr) >= 0):
            raise ConfigError("[numerics] each probe ladder must be strictly decreasing and positive")
    if int(num["probe"]) < 0:
        raise ConfigError("[numerics] probe must be nonnegative")
    for key in ("max_outer", "max_fixed", "n_particles", "battery"):
        if int(num[key]) < 1:
            raise ConfigError(f"[numerics] {key} must be at least 1")
    theta = num["theta"]
    if isinstance(theta, str):
        if theta not in ("corrective", "half", "fictitious"):
            raise ConfigError("[numerics] theta must be 'corrective', 'half', 'fictitious' or a number in (0, 1]")
    elif not 0 < float(theta) <= 1:
        raise ConfigError("[numerics] theta must lie in (0, 1]")
    if int(num["seed"]) < 0:
        raise ConfigError("[numerics] seed must be nonnegative")


def _resolve(base_dir, path):
    p = Path(path)
    p = p if p.is_absolute() else base_dir / p
    if not p.is_file():
        raise ConfigError(f"referenced file {p} does not exist")
    return p


def _load_field_file(path, grid, spacetime, name):
    d, n, nt, arr = read_dump(path)
    if (d, n) != (grid.d, grid.n):
        raise ConfigError(f"{name}: file {path} holds a d={d}, n={n} field, grid has d={grid.d}, n={grid.n}")
    if nt == 0:
        return np.broadcast_to(arr, (grid.nt + 1, grid.size)).copy() if spacetime else arr
    if not spacetime:
        raise ConfigError(f"{name}: expected a scalar field in {path}")
    if nt != grid.nt:
        raise ConfigError(f"{name}: file {path} has nt={nt}, grid has nt={grid.nt}")
    return arr


def build_field(expr, grid, base_dir=Path("."), spacetime=False, name="field"):
    """Evaluate a field expression (number or table) on the grid."""
    if isinstance(expr, (int, float)):
        expr = {"kind": "constant", "value": float(expr)}
    if not isinstance(expr, dict):
        raise ConfigError(f"{name}: expected a number or a table")
    kind = expr.get("kind", "constant")
    if kind not in FIELD_KINDS:
        raise ConfigError(f"{name}: unknown field kind {kind!r}")
    if kind == "file":
        return _load_field_file(_resolve(base_dir, expr.get("path", "")), grid, spacetime, name)
    x = grid.coordinates()
    base = float(expr.get("base", expr.get("value", 1.0 if kind == "uniform" else 0.0)))
    if kind in ("constant", "uniform"):
        vals = np.full(grid.size, base)
    elif kind == "cosine":
        mode = np.asarray(expr.get("mode", [1] + [0] * (grid.d - 1)), dtype=np.float64)
        if mode.shape != (grid.d,):
            raise ConfigError(f"{name}: cosine mode needs {grid.d} entries")
        phase = float(expr.get("phase", 0.0))
        vals = base + float(expr.get("amplitude", 0.5)) * np.cos(2 * np.pi * (x @ mode + phase))
    else:
        center = np.asarray(expr.get("center", [0.5] * grid.d), dtype=np.float64)
        if center.shape != (grid.d,):
            raise ConfigError(f"{name}: gaussian center needs {grid.d} entries")
        width = float(expr.get("width", 0.1))
        if not width > 0:
            raise ConfigError(f"{name}: gaussian width must be positive")
        diff = (x - center + 0.5) % 1.0 - 0.5
        vals = base + float(expr.get("amplitude", 1.0)) * np.exp(-0.5 * np.sum(diff**2, axis=1) / width**2)
    if spacetime:
        return np.broadcast_to(vals, (grid.nt + 1, grid.size)).copy()
    return vals


def region_mask(regions, grid, base_dir=Path(".")):
    """Space-time boolean mask from a list of box expressions or mask files.

    Level ``k`` belongs to a box when ``t_start <= t_k <= t_end``.
    """
    mask = np.zeros((grid.nt + 1, grid.size), dtype=bool)
    x = grid.coordinates()
    t = grid.times
    for r in regions:
        if "file" in r:
            vals = _load_field_file(_resolve(base_dir, r["file"]), grid, True, "region file")
            if not np.all((vals == 0) | (vals == 1)):
                raise ConfigError("region file must hold 0/1 values")
            mask |= vals.astype(bool)
            continue
        try:
            lo = np.asarray(r["lower"], dtype=np.float64)
            hi = np.asarray(r["upper"], dtype=np.float64)
        except KeyError as exc:
            raise ConfigError(f"region needs {exc.args[0]!r} (or 'file')") from exc
        if lo.shape != (grid.d,) or hi.shape != (grid.d,):
            raise ConfigError(f"region bounds need {grid.d} entries")
        inside = np.ones(grid.size, dtype=bool)
        for a in range(grid.d):
            la = lo[a] % 1.0
            ha = 1.0 if hi[a] == 1.0 else hi[a] % 1.0
            xa = x[:, a]
            inside &= ((xa >= la) & (xa < ha)) if la <= ha else ((xa >= la) | (xa < ha))
        t0 = float(r.get("t_start", 0.0))
        t1 = float(r.get("t_end", grid.T))
        if t1 < t0:
            raise ConfigError("region time window has t_end < t_start")
        levels = (t >= t0 - 1e-12) & (t <= t1 + 1e-12)
        mask[levels] |= inside[None]
    return mask


def build_jump_system(cfg, with_intensity=True, stationary=False):
    grid = cfg.grid
    entries = cfg.raw.get("jumps")
    if not entries:
        raise ConfigError("at least one [[jumps]] entry is required")
    jumps, costs, masks = [], [], []
    for i, e in enumerate(entries):
        if "displacement" in e:
            disp = np.asarray(e["displacement"], dtype=np.float64) * grid.n
            if np.any(np.abs(disp - np.round(disp)) > 1e-9):
                raise ConfigError(f"jump {i}: displacement {e['displacement']} is not a lattice vector for n={grid.n}")
            off = tuple(int(v) for v in np.round(disp))
        elif "offset" in e:
            off = tuple(int(v) for v in e["offset"])
        else:
            raise ConfigError(f"jump {i}: missing 'offset' (or 'displacement')")
        if len(off) != grid.d:
            raise ConfigError(f"jump {i}: offset {off} has {len(off)} entries, grid dimension is {grid.d}")
        try:
            LatticeJump(off).on(grid)
        except ValueError as exc:
            raise ConfigError(f"jump {i}: invalid jump offset {off}: {exc}") from exc
        jumps.append(off)
        if "cost_file" in e:
            costs.append(_load_field_file(_resolve(cfg.base_dir, e["cost_file"]), grid, False, "cost"))
        else:
            costs.append(build_field(e.get("cost", 1.0), grid, cfg.base_dir, name=f"jump {i} cost"))
        if "intensity_file" in e:
            V = _load_field_file(_resolve(cfg.base_dir, e["intensity_file"]), grid, True, "intensity")
        else:
            V = region_mask(e.get("regions", []), grid, cfg.base_dir).astype(np.float64)
        masks.append(V)
    cost = np.asarray(costs)
    k0 = float(cfg.raw.get("problem", {}).get("k0", cost.min()))
    V = np.asarray(masks)
    if V.sum(axis=0).max() > 1 + 1e-12:
        # Overlapping regions: the first jump listed keeps the point.
        taken = np.zeros(V.shape[1:], dtype=np.float64)
        for j in range(V.shape[0]):
            V[j] = np.minimum(V[j], 1.0 - taken)
            taken += V[j]
    if stationary:
        V = V[:, 0]
    try:
        return JumpSystem(grid, jumps, cost, k0, V if with_intensity else None)
    except ValueError as exc:
        raise ConfigError(f"[[jumps]]: {exc}") from exc


def _coupling_kwargs(cfg):
    c = dict(cfg.raw.get("coupling", {}))
    bg = c.pop("background", None)
    allowed = {"kind", "c", "p", "width"}
    extra = set(c) - allowed
    if extra:
        raise ConfigError(f"[coupling]: unknown keys {sorted(extra)}")
    if bg is not None:
        c["background"] = build_field(bg, cfg.grid, cfg.base_dir, name="coupling background")
    return c


def build_coupling(cfg):
    from .mfg import Coupling

    try:
        return Coupling(**_coupling_kwargs(cfg))
    except ValueError as exc:
        raise ConfigError(f"[coupling]: {exc}") from exc
