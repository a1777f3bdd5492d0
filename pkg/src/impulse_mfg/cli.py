"""Command line front end: ``impulse-mfg run | sweep | validate``.

Every run writes ``report.json`` (one entry per check with the measured
value, the threshold and pass/fail) and ``summary.txt``, plus the
scenario's dumps and tables. Exit codes: 0 when every asserted check
passes, 1 on a failed check or a solver that did not converge, 2 on a
configuration error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import importlib.resources
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, build_coupling, load_config

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class Check:
    """One invariant check: measured ``value`` against ``threshold`` with a comparison."""

    def __init__(self, name, value, threshold, passed, asserted=True, note=""):
        self.name = name
        self.value = value
        self.threshold = threshold
        self.passed = bool(passed)
        self.asserted = asserted
        self.note = note

    def as_dict(self):
        return {"name": self.name, "value": self.value, "threshold": self.threshold, "pass": self.passed,
                "asserted": self.asserted, "note": self.note}


def _le(name, value, threshold, **kw):
    return Check(name, float(value), float(threshold), float(value) <= float(threshold), **kw)


def _ge(name, value, threshold, **kw):
    return Check(name, float(value), float(threshold), float(value) >= float(threshold), **kw)


# -- scenario runners ----------------------------------------------------------
#
# Each runner takes (cfg, out) with ``out`` a directory or None (dry run
# never reaches here) and returns (checks, metrics, extra_report).


def _mass_checks(run, m0, grid):
    ref = float(run.mass_trace[0])
    drift = float(np.max(np.abs(run.mass_trace - ref)) / ref)
    mneg = float(run.m.min())
    tol_pos = 1e-10 * float(np.max(m0))
    return [
        _le("mass_conservation", drift, 1e-10),
        _ge("positivity", mneg, -tol_pos),
    ]


def _write_mass_trace(out, run, grid):
    io.write_table(out / "mass_trace.csv", ["t", "mass"], zip(grid.times, run.mass_trace))


def _run_fp(cfg, out):
    from .fokker_planck import duality_lp, epsilon_sweep, penalty_identity_value, solve_penalized_multi
    from .qvi import HypothesisViolation, solve_constrained_equality
    from .grid import adjoint_pairing

    grid, num = cfg.grid, cfg.numerics
    js = cfg.jump_system()
    m0 = cfg.field("initial", default={"kind": "uniform"})
    ladder = list(num["ladder"]) or [float(num["epsilon"])]
    checks = []
    try:
        cs = solve_constrained_equality(js, np.zeros((grid.nt + 1, grid.size)), grid)
    except HypothesisViolation as exc:
        cs = None
        checks.append(Check("jump_chains_exit", 0.0, 0.0, False, asserted=False, note=str(exc)))
    small = grid.size * (grid.nt + 1) <= int(num.get("lp_limit", 5000))
    sweep = epsilon_sweep(m0, js, ladder, grid) if len(ladder) >= 2 else None
    runs = sweep.runs if sweep is not None else [solve_penalized_multi(m0, js, ladder[0], grid)]
    rows = []
    for eps, run in zip(ladder, runs):
        penalty = -penalty_identity_value(run, js)
        D_id = adjoint_pairing(run.m, cs.u, m0, grid) if cs is not None else float("nan")
        D_lp = duality_lp(run.m, m0, js, grid).value if small else float("nan")
        rows.append((eps, D_id, D_lp, run.integral_on_A()))
        for c in _mass_checks(run, m0, grid):
            c.name = f"{c.name}[eps={io.fmt(eps)}]"
            checks.append(c)
        if cs is not None:
            rel = abs(D_id + penalty) / max(abs(penalty), 1e-300)
            checks.append(_le(f"duality_identity[eps={io.fmt(eps)}]", rel, 1e-8))
    io.write_table(out / "duality.csv", ["epsilon", "D_identity", "D_lp", "int_A_m"], rows)
    last = runs[-1]
    _write_mass_trace(out, last, grid)
    io.write_dump(out / "m.bin", last.m, grid)
    metrics = {"D": rows[-1][1], "int_A_m": rows[-1][3], "iterations": 0}
    extra = {"epsilons": ladder}
    if sweep is not None:
        checks.append(Check("int_A_slope", sweep.slope, [0.8, 1.2], 0.8 <= sweep.slope <= 1.2))
        mnorm = float(np.max(np.abs(sweep.m)))
        checks.append(_le("sup_on_A_finest", sweep.residual_on_A[-1], float(num["threshold"]) * mnorm))
        checks.append(Check("int_A_monotone", float(np.max(np.diff(sweep.int_A))), 0.0,
                            bool(np.all(np.diff(sweep.int_A) < 0))))
        extra["slope"] = sweep.slope
        extra["sup_on_A"] = sweep.residual_on_A
    if int(num["probe"]) > 0 and cs is not None:
        checks += _adjoint_probe(cfg, js, m0, cs, out)
    return checks, metrics, extra


def _adjoint_probe(cfg, js, m0, cs, out):
    """Compare two limit surrogates from different ladders through adjoint test functions."""
    from .fokker_planck import epsilon_sweep
    from .timedomain import uniqueness_probe

    grid, num = cfg.grid, cfg.numerics
    first, second = (epsilon_sweep(m0, js, lad, grid).m for lad in num["probe_ladders"])
    rng = np.random.default_rng(cfg.seed)
    amp = 0.5 * 0.1 * js.k0 / grid.T
    perts = []
    for _ in range(int(num["probe"])):
        f = amp * rng.uniform(-1.0, 1.0, (grid.nt + 1, grid.size))
        f[-1] = 0.0
        perts.append(f)
    rows = uniqueness_probe(first, second, m0, js, perts, grid)
    worst = max(max(abs(r["X"]), abs(r["Y"])) / max(r["scale"], 1e-300) for r in rows)
    io.write_json(out / "adjoint_report.json", {
        "ladders": num["probe_ladders"],
        "separation_margin": cs.separation_margin,
        "perturbation_amplitude": amp,
        "rows": rows,
        "worst_relative": worst,
    })
    return [_le("adjoint_probe_relative", worst, 1e-4)]


def _run_fp_stationary(cfg, out):
    from .fokker_planck import solve_penalized_stationary

    grid, num = cfg.grid, cfg.numerics
    js = cfg.jump_system(stationary=True)
    rho = cfg.field("initial", default={"kind": "uniform"})
    m, info = solve_penalized_stationary(rho, js, float(num["delta"]), float(num["epsilon"]), grid)
    io.write_dump(out / "m.bin", m, grid)
    io.write_field_csv(out / "m.csv", m, grid)
    checks = [
        _le("stationary_mass_balance", abs(info["mass_balance_error"]), 1e-10),
        _ge("positivity", info["min_m"], -1e-10 * float(np.max(rho)) / float(num["delta"])),
    ]
    return checks, {"D": float("nan"), "int_A_m": float(np.sum(m * (js.intensity.sum(axis=0) > 0)) * grid.cell_volume),
                    "iterations": 0}, {"info": info}


def _run_qvi(cfg, out):
    from .qvi import solve_qvi

    grid, num = cfg.grid, cfg.numerics
    js = cfg.jump_system(with_intensity=False)
    f = cfg.field("source", default=0.0, spacetime=True)
    sol = solve_qvi(js, f, grid, omega=float(num["omega"]), tol_pde=float(num["tol_pde"]),
                    tol_outer=float(num["tol_outer"]), max_outer=int(num["max_outer"]),
                    lower_bound=float(num["lower_bound"]))
    io.write_dump(out / "u.bin", sol.u, grid)
    io.write_json(out / "qvi.json", {**sol.summary(), "tolerances": {
        "tol_pde": num["tol_pde"], "tol_outer": num["tol_outer"], "omega": num["omega"]}})
    io.write_table(out / "qvi_history.csv", ["iteration", "change"], enumerate(sol.history, 1))
    checks = [
        Check("outer_iterates_decreasing", sol.max_increase, 1e-10, sol.monotone),
        _le("feasibility", sol.feasibility, 1e-8),
        _le("complementarity_residual", sol.complementarity, 1e-8),
    ]
    return checks, {"D": float("nan"), "int_A_m": float("nan"), "iterations": sol.outer_iterations}, {}


def _iter_cfg(cfg):
    from .mfg import IterConfig

    num = cfg.numerics
    return IterConfig(theta=num["theta"], tol_fixed=float(num["tol_fixed"]), max_fixed=int(num["max_fixed"]),
                      tol_qvi=float(num["tol_outer"]))


def _run_mfg(cfg, out):
    from .mfg import check_mfg_solution, solve_penalized_mfg

    grid, num = cfg.grid, cfg.numerics
    js = cfg.jump_system(with_intensity=False)
    m0 = cfg.field("initial", default={"kind": "uniform"})
    coupling = build_coupling(cfg)
    sol = solve_penalized_mfg(m0, js, coupling, float(num["epsilon"]), grid, _iter_cfg(cfg),
                              m_init=cfg.raw.get("problem", {}).get("m_init"))
    rep = check_mfg_solution(sol, coupling, js, grid, n_random=int(num["battery"]), seed=cfg.seed,
                             lp=grid.size * (grid.nt + 1) <= int(num.get("lp_limit", 5000)))
    io.write_dump(out / "m.bin", sol.m, grid)
    io.write_dump(out / "u.bin", sol.u, grid)
    io.write_dump(out / "alpha.bin", sol.alpha, grid)
    io.write_table(out / "fixed_point_trace.csv", ["iteration", "l2_change", "complementarity", "fw_gap"], sol.trace)
    io.write_json(out / "mfg_report.json", {"residuals": sol.residuals, "check": rep, "iterations": sol.iterations,
                                            "converged": sol.converged})
    checks = [
        Check("fixed_point_converged", sol.iterations, int(num["max_fixed"]), sol.converged),
        _le("complementarity", abs(rep["complementarity_integral"]), rep["complementarity_bound"]),
        _le("qvi_feasibility", rep["feasibility_violation"], 1e-8),
        _ge("vi_margin", rep["min_vi_margin"], -rep["vi_tolerance"]),
        _ge("positivity", rep["min_m"], -1e-10 * float(np.max(m0))),
    ]
    if "D_lp" in rep:
        checks.append(Check("duality_finite", rep["D_lp"], "not pinned", rep["D_finite"]))
    return checks, {"D": rep.get("D_lp", float("nan")), "int_A_m": float("nan"), "iterations": sol.iterations}, {}


def _run_mfg_stationary(cfg, out, objective=False):
    from .fokker_planck import solve_penalized_stationary
    from .mfg import optimal_control_objective, resolvent, solve_stationary_mfg, stationary_duality

    grid, num = cfg.grid, cfg.numerics
    js = cfg.jump_system(with_intensity=False)
    rho = cfg.field("initial", default={"kind": "uniform"})
    coupling = build_coupling(cfg)
    delta, lam = float(num["delta"]), float(num["lambda"])
    sol = solve_stationary_mfg(rho, js, coupling, delta, lam, float(num["epsilon"]), grid, _iter_cfg(cfg),
                               n_random=int(num["battery"]), seed=cfg.seed)
    r = sol.report
    io.write_dump(out / "m.bin", sol.m, grid)
    io.write_dump(out / "u.bin", sol.u, grid)
    io.write_table(out / "fixed_point_trace.csv", ["iteration", "l2_change", "fw_gap"], sol.trace)
    checks = [
        Check("fixed_point_converged", sol.iterations, int(num["max_fixed"]), sol.converged),
        _le("stationary_mass_balance", abs(r["mass_balance_error"]), 1e-10),
        _le("complementarity", abs(r["complementarity"]), 1e-6 * max(r["complementarity_scale"], 1.0)),
        _le("qvi_feasibility", r["feasibility_violation"], 1e-8),
        _ge("vi_margin", r["min_vi_margin"], -1e-6),
    ]
    extra = {"stationary_report": r}
    if objective:
        mu = resolvent(rho, delta, grid)
        D_mu, _ = stationary_duality(mu, rho, js, delta, grid)
        checks.append(_le("resolvent_duality_zero", abs(D_mu), 1e-8))
        obj = optimal_control_objective(sol.m, coupling, js, rho, delta, grid)
        rng = np.random.default_rng(cfg.seed)
        rows = []
        worst = np.inf
        for i in range(int(num["battery"])):
            V = (rng.uniform(size=(js.n_jumps, grid.size)) < 0.3) * rng.uniform(size=(js.n_jumps, grid.size))
            V /= np.maximum(V.sum(axis=0), 1.0)[None]
            m_v, _ = solve_penalized_stationary(rho, js.with_intensity(V), delta, 1e-3, grid)
            t = rng.uniform(0.01, 1.0)
            trial = (1 - t) * sol.m + t * m_v
            val = optimal_control_objective(trial, coupling, js, rho, delta, grid)
            rows.append((i, t, val, val - obj))
            worst = min(worst, val - obj)
        io.write_table(out / "objective_battery.csv", ["trial", "t", "objective", "excess"], rows)
        checks.append(_ge("objective_minimality", worst, -1e-8))
        extra.update({"objective": obj, "resolvent_D": D_mu})
    return checks, {"D": float("nan"), "int_A_m": float("nan"), "iterations": sol.iterations}, extra


def _run_optimal_control(cfg, out):
    if not np.isclose(float(cfg.numerics["delta"]), float(cfg.numerics["lambda"]), rtol=0, atol=0):
        raise ConfigError("optimal_control needs [numerics] lambda equal to delta")
    return _run_mfg_stationary(cfg, out, objective=True)


def _run_oracle(cfg, out):
    from .fokker_planck import epsilon_sweep, initial_skip, solve_penalized_multi
    from .oracle import l1_distance, simulate_limit, simulate_penalized

    grid, num = cfg.grid, cfg.numerics
    js = cfg.jump_system()
    m0 = cfg.field("initial", default={"kind": "uniform"})
    N = int(num["n_particles"])
    eps = float(num["epsilon"])
    run = solve_penalized_multi(m0, js, eps, grid)
    ens = simulate_penalized(m0, js, eps, grid, N, cfg.seed)
    l1 = l1_distance(run.m, ens, grid)
    rows = [(k, b, int(c)) for k in range(grid.nt + 1) for b, c in enumerate(ens.hist[k]) if c]
    io.write_table(out / "particles_hist.csv", ["level", "bin", "count"], rows)
    io.write_table(out / "jump_log.csv", ["time_bin", "jump", "count"],
                   [(k, j, int(ens.jump_log[k, j])) for k in range(grid.nt) for j in range(js.n_jumps)])
    io.write_dump(out / "m.bin", run.m, grid)
    io.write_dump(out / "particles_density.bin", ens.density(grid).astype(np.float64), grid)
    checks = [
        _le("oracle_l1_penalized", l1, float(num.get("l1_tol", 0.05))),
        Check("particles_jump_only_in_A", ens.jumps_outside, 0, ens.jumps_outside == 0),
    ]
    extra = {"seed": cfg.seed, "N": N, "substeps": ens.substeps}
    metrics = {"D": -run.penalty_integral, "int_A_m": run.integral_on_A(), "l1": l1, "iterations": 0}
    ladder = list(num["ladder"])
    if ladder and js.n_jumps == 1 and not js.jump_masks()[0].std(axis=0).any():
        lim = epsilon_sweep(m0, js, ladder, grid)
        ens_l = simulate_limit(m0, js.jump_masks()[0][0], js.jumps[0], grid, N, cfg.seed)
        skip = initial_skip(grid)
        dists = [l1_distance(lim.m, ens_l, grid, level=k) for k in range(skip, grid.nt + 1)]
        checks.append(_le("oracle_l1_limit", max(dists), float(num.get("l1_limit_tol", 0.08))))
        extra["l1_limit_by_level"] = dists
        metrics["l1_limit"] = max(dists)
    return checks, metrics, extra


RUNNERS = {
    "fp_single": _run_fp,
    "fp_multi": _run_fp,
    "fp_stationary": _run_fp_stationary,
    "qvi": _run_qvi,
    "mfg": _run_mfg,
    "mfg_stationary": _run_mfg_stationary,
    "optimal_control": _run_optimal_control,
    "oracle_compare": _run_oracle,
}


# -- orchestration --------------------------------------------------------------


def resolve_config_path(path):
    """Return ``path`` if it exists, else the bundled config with the same file name."""
    p = Path(path)
    if p.is_file():
        return p
    bundled = importlib.resources.files("impulse_mfg") / "configs" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    return p


def bundled_configs():
    root = importlib.resources.files("impulse_mfg") / "configs"
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".toml"))


def _write_summary(path, scenario, checks, metrics):
    lines = [f"scenario: {scenario}"]
    for c in checks:
        flag = "PASS" if c.passed else ("FAIL" if c.asserted else "INFO")
        val = io.fmt(c.value) if isinstance(c.value, (int, float, np.number)) else str(c.value)
        thr = io.fmt(c.threshold) if isinstance(c.threshold, (int, float, np.number)) else str(c.threshold)
        lines.append(f"{flag} {c.name}: value={val} threshold={thr}")
    for k, v in metrics.items():
        lines.append(f"metric {k}: {io.fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


def execute(cfg, out):
    """Run ``cfg`` into directory ``out``; returns ``(exit_code, report)``."""
    from .qvi import ConvergenceError

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        checks, metrics, extra = RUNNERS[cfg.scenario](cfg, out)
        error = None
    except ConvergenceError as exc:
        checks, metrics, extra = [Check("solver_converged", exc.residual, 0.0, False, note=str(exc))], {}, {}
        error = str(exc)
    ok = all(c.passed for c in checks if c.asserted)
    report = {
        "scenario": cfg.scenario,
        "grid": io.grid_header(cfg.grid),
        "seed": cfg.seed,
        "checks": [c.as_dict() for c in checks],
        "metrics": metrics,
        "all_pass": ok,
        "details": extra,
        "error": error,
        "metadata": {
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "runtime_s": time.perf_counter() - start,
        },
    }
    io.write_json(out / "report.json", report)
    _write_summary(out / "summary.txt", cfg.scenario, checks, metrics)
    return (EXIT_OK if ok else EXIT_FAIL), report


def _default_out(cfg, path):
    if cfg.output_dir is not None:
        return cfg.output_dir
    return Path.cwd() / "runs" / Path(path).stem


def cmd_run(args):
    path = resolve_config_path(args.config)
    cfg = load_config(path)
    if args.dry_run:
        print(f"config {path} is valid (scenario {cfg.scenario}); dry run, nothing written")
        return EXIT_OK
    out = Path(args.out) if args.out else _default_out(cfg, path)
    code, report = execute(cfg, out)
    for c in report["checks"]:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['name']}")
    print(f"artifacts in {out}")
    return code


def cmd_validate(args):
    path = resolve_config_path(args.config)
    cfg = load_config(path)
    print(f"config {path} is valid (scenario {cfg.scenario})")
    return EXIT_OK


def _sweep_one(job):
    cfg, out = job
    code, report = execute(cfg, out)
    return code, report


def parse_values(text):
    vals = [v.strip() for v in (text or "").split(",") if v.strip()]
    if not vals:
        raise ConfigError("--values needs at least one value")
    return vals


def cmd_sweep(args):
    path = resolve_config_path(args.config)
    base = load_config(path)
    values = parse_values(args.values)
    if args.param not in ("epsilon", "n", "nt", "N", "theta"):
        raise ConfigError(f"--param must be one of epsilon, n, nt, N, theta (got {args.param!r})")
    cfgs = [base.with_value(args.param, v) for v in values]
    root = Path(args.out) if args.out else _default_out(base, path).with_name(f"{Path(path).stem}_sweep")
    jobs = [(c, root / f"{args.param}={v}") for c, v in zip(cfgs, values)]
    workers = min(thread_cap(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    rows = []
    code = EXIT_OK
    for v, (c, rep) in zip(values, results):
        m = rep["metrics"]
        rows.append((v, m.get("D", float("nan")), m.get("int_A_m", float("nan")), m.get("l1", float("nan")),
                     m.get("iterations", 0), rep["all_pass"]))
        code = max(code, c)
    io.write_table(root / "sweep.csv", [args.param, "D", "int_A_m", "l1_oracle", "iterations", "all_pass"], rows)
    print(f"sweep of {len(values)} runs in {root}")
    return code


def thread_cap():
    """Parallelism cap from ``IMPULSE_MFG_THREADS`` (default 1)."""
    raw = os.environ.get("IMPULSE_MFG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"IMPULSE_MFG_THREADS must be a positive integer (got {raw!r})") from exc
    if n < 1:
        raise ConfigError(f"IMPULSE_MFG_THREADS must be a positive integer (got {raw!r})")
    return n


def build_parser():
    p = argparse.ArgumentParser(prog="impulse-mfg", description="Impulse-control MFG solvers on torus grids")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one config")
    r.add_argument("config")
    r.add_argument("--dry-run", action="store_true", help="validate only, write nothing")
    r.add_argument("--out", help="artifact directory")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sweep", help="run one config over a list of parameter values")
    s.add_argument("config")
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    v = sub.add_parser("validate", help="parse and validate a config")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        thread_cap()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
