import struct

import numpy as np
import pytest

from impulse_mfg.grid import TorusGrid
from impulse_mfg.io import fmt, read_dump, read_table, write_dump, write_field_csv, write_json, write_table


def test_dump_layout_and_roundtrip(tmp_path):
    g = TorusGrid(d=2, n=4, T=1.0, nt=3, nu=0.1)
    a = np.arange(4 * 16, dtype=np.float64).reshape(4, 16) / 7
    write_dump(tmp_path / "a.bin", a, g)
    raw = (tmp_path / "a.bin").read_bytes()
    assert struct.unpack_from("<QQQ", raw) == (2, 4, 3)
    assert len(raw) == 24 + 8 * a.size
    assert np.frombuffer(raw[24:32], "<f8")[0] == a[0, 0]
    d, n, nt, back = read_dump(tmp_path / "a.bin")
    assert (d, n, nt) == (2, 4, 3)
    assert np.array_equal(back, a)


def test_scalar_dump(tmp_path):
    g = TorusGrid(d=1, n=8, T=1.0, nt=3, nu=0.1)
    write_dump(tmp_path / "s.bin", np.linspace(0, 1, 8), g)
    assert read_dump(tmp_path / "s.bin")[2] == 0
    with pytest.raises(ValueError):
        write_dump(tmp_path / "bad.bin", np.zeros(5), g)


def test_fmt_round_trips():
    for x in (0.1, 1 / 3, 1e-300, -2.5e17):
        assert float(fmt(x)) == x
    assert fmt(True) == "true" and fmt(3) == "3"


def test_field_csv(tmp_path):
    g = TorusGrid(d=2, n=4, T=1.0, nt=1, nu=0.1)
    vals = np.arange(16.0)
    vals[5] = 0.1
    write_field_csv(tmp_path / "f.csv", vals, g)
    header, rows = read_table(tmp_path / "f.csv")
    assert header == ["i0", "i1", "value"]
    assert len(rows) == 16
    assert rows[1] == ["0", "1", "1"]
    assert rows[5] == ["1", "1", "0.10000000000000001"]


def test_table_and_json(tmp_path):
    write_table(tmp_path / "t.csv", ["a", "b"], [(1, 0.5), (2, "x")])
    assert read_table(tmp_path / "t.csv")[1] == [["1", "0.5"], ["2", "x"]]
    write_json(tmp_path / "r.json", {"x": np.float64(np.inf), "y": np.arange(2), "z": np.bool_(True)})
    text = (tmp_path / "r.json").read_text()
    assert '"inf"' in text and "true" in text
