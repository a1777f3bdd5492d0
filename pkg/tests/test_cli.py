import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from impulse_mfg import io
from impulse_mfg.cli import bundled_configs, main, parse_values, resolve_config_path
from impulse_mfg.config import ConfigError


def _variant(tmp_path, name, replace):
    text = resolve_config_path(name).read_text()
    for old, new in replace:
        assert old in text
        text = text.replace(old, new)
    p = tmp_path / name
    p.write_text(text)
    return p


def test_bundled_configs_validate(capsys):
    names = bundled_configs()
    assert len(names) >= 9
    for name in names:
        assert main(["validate", str(name)]) == 0
    assert "valid" in capsys.readouterr().out


def test_dry_run_writes_nothing(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "qvi_1d.toml", "--dry-run", "--out", str(out)]) == 0
    assert not out.exists()
    assert "nothing written" in capsys.readouterr().out


def test_run_writes_report_and_summary(tmp_path):
    out = tmp_path / "qvi"
    assert main(["run", "qvi_1d.toml", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["all_pass"] and report["error"] is None
    assert {"scenario", "grid", "seed", "checks", "metrics", "metadata"} <= set(report)
    d, n, nt, u = io.read_dump(out / "u.bin")
    assert (d, n) == (1, report["grid"]["n"]) and u.shape == (nt + 1, n)
    lines = (out / "summary.txt").read_text().splitlines()
    by_name = {c["name"]: c for c in report["checks"]}
    for line in lines[1:]:
        if line.startswith(("PASS", "FAIL", "INFO")):
            flag, rest = line.split(" ", 1)
            name, vals = rest.split(": ", 1)
            check = by_name[name]
            assert (flag == "PASS") == check["pass"]
            value = vals.split(" ")[0].split("=")[1]
            if isinstance(check["value"], float):
                assert float(value) == check["value"]


def test_missing_config_is_config_error(capsys):
    assert main(["run", "/nonexistent/config.toml"]) == 2
    assert "config error" in capsys.readouterr().err


def test_bad_offset_is_config_error(tmp_path, capsys):
    p = _variant(tmp_path, "qvi_1d.toml", [("offset = [32]", "offset = [64]")])
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "offset" in capsys.readouterr().err


def test_bad_numerics_is_config_error(tmp_path):
    p = _variant(tmp_path, "fp_ladder_1d.toml", [("ladder = [1e-1, 3e-2", "ladder = [3e-2, 1e-1")])
    assert main(["validate", str(p)]) == 2


def test_non_convergence_exits_one(tmp_path):
    p = _variant(tmp_path, "mfg_1d.toml", [('theta = "corrective"', 'theta = "corrective"\nmax_fixed = 2')])
    out = tmp_path / "mfg"
    assert main(["run", str(p), "--out", str(out)]) == 1
    report = json.loads((out / "report.json").read_text())
    failed = [c["name"] for c in report["checks"] if not c["pass"]]
    assert "fixed_point_converged" in failed


def test_thread_env_validated(monkeypatch):
    monkeypatch.setenv("IMPULSE_MFG_THREADS", "zero")
    assert main(["validate", "qvi_1d.toml"]) == 2


def test_parse_values():
    assert parse_values("1e-2, 1e-3,") == ["1e-2", "1e-3"]
    with pytest.raises(ConfigError):
        parse_values(" , ")


def test_sweep_epsilon(tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "fp_single_1d.toml", "--param", "epsilon", "--values", "1e-1,1e-2,1e-3",
                 "--out", str(out)]) == 0
    rows = (out / "sweep.csv").read_text().strip().splitlines()
    assert rows[0].split(",")[:3] == ["epsilon", "D", "int_A_m"]
    assert len(rows) == 4
    intA = [float(r.split(",")[2]) for r in rows[1:]]
    assert intA[0] > intA[1] > intA[2]
    assert main(["sweep", "fp_single_1d.toml", "--param", "colour", "--values", "1"]) == 2
    assert main(["sweep", "fp_single_1d.toml", "--param", "epsilon", "--values", ""]) == 2


def test_rerun_is_bit_identical(tmp_path):
    for k in range(2):
        assert main(["run", "mfg_1d.toml", "--out", str(tmp_path / f"r{k}")]) == 0
    for name in ("m.bin", "u.bin", "alpha.bin"):
        assert (tmp_path / "r0" / name).read_bytes() == (tmp_path / "r1" / name).read_bytes()


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "impulse_mfg.cli", "validate", "fp_single_1d.toml"],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
