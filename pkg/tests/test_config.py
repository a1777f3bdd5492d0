import numpy as np
import pytest

from impulse_mfg import io
from impulse_mfg.config import ConfigError, build_coupling, build_field, from_dict, region_mask
from impulse_mfg.grid import TorusGrid


def _raw(**over):
    raw = {
        "grid": {"d": 1, "n": 16, "nt": 8, "nu": 0.02},
        "problem": {"scenario": "fp_single"},
        "jumps": [{"offset": [8], "cost": 1.0, "regions": [{"lower": [0.25], "upper": [0.5]}]}],
    }
    raw.update(over)
    return raw


@pytest.fixture
def g():
    return TorusGrid(1, 16, 1.0, 8, 0.02)


def test_minimal_config_defaults():
    cfg = from_dict(_raw())
    assert cfg.numerics["epsilon"] == 1e-3 and cfg.seed == 0
    js = cfg.jump_system()
    assert js.jump_set()[0].nonzero()[0].tolist() == [4, 5, 6, 7]


def test_displacement_must_be_lattice_vector():
    raw = _raw(jumps=[{"displacement": [0.5], "cost": 1.0}])
    assert from_dict(raw).jump_system(with_intensity=False).jumps[0].offset == (8,)
    with pytest.raises(ConfigError, match="lattice"):
        from_dict(_raw(jumps=[{"displacement": [0.3], "cost": 1.0}]))


@pytest.mark.parametrize("bad, match", [
    ({"grid": {"n": 16}}, "nt"),
    ({"problem": {"scenario": "nope"}}, "scenario"),
    ({"numerics": {"epsilon": -1}}, "epsilon"),
    ({"numerics": {"omega": 2.5}}, "omega"),
    ({"numerics": {"theta": "sometimes"}}, "theta"),
    ({"jumps": []}, "jumps"),
    ({"jumps": [{"offset": [16], "cost": 1.0}]}, "offset"),
    ({"jumps": [{"offset": [8], "cost": -1.0}]}, "k0"),
    ({"coupling": {"q": 1}}, "unknown keys"),
])
def test_invalid_configs(bad, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(_raw(**bad))


def test_field_kinds(g):
    x = g.coordinates()[:, 0]
    np.testing.assert_allclose(build_field(2.5, g), 2.5)
    np.testing.assert_allclose(build_field({"kind": "cosine", "base": 1, "amplitude": 0.5}, g),
                               1 + 0.5 * np.cos(2 * np.pi * x))
    bump = build_field({"kind": "gaussian", "base": 0, "amplitude": 1, "center": [0.0], "width": 0.1}, g)
    assert bump[0] == pytest.approx(1.0)
    assert bump[1] == pytest.approx(bump[-1])
    assert build_field(1.0, g, spacetime=True).shape == (9, 16)
    with pytest.raises(ConfigError):
        build_field({"kind": "spline"}, g)


def test_field_file_roundtrip(tmp_path, g):
    vals = np.arange(16, dtype=float)
    io.write_dump(tmp_path / "f.bin", vals, g)
    np.testing.assert_array_equal(build_field({"kind": "file", "path": "f.bin"}, g, tmp_path), vals)
    with pytest.raises(ConfigError):
        build_field({"kind": "file", "path": "missing.bin"}, g, tmp_path)


def test_region_wraps_and_time_window(g):
    m = region_mask([{"lower": [0.875], "upper": [0.125]}], g)
    assert m[0].nonzero()[0].tolist() == [0, 1, 14, 15]
    m = region_mask([{"lower": [0.0], "upper": [0.25], "t_start": 0.5}], g)
    assert not m[:4].any() and m[4:, :4].all()
    with pytest.raises(ConfigError):
        region_mask([{"lower": [0.0], "upper": [0.25], "t_start": 0.5, "t_end": 0.1}], g)


def test_overlap_goes_to_first_jump():
    raw = _raw(jumps=[
        {"offset": [8], "cost": 1.0, "regions": [{"lower": [0.0], "upper": [0.5]}]},
        {"offset": [4], "cost": 1.0, "regions": [{"lower": [0.25], "upper": [0.75]}]},
    ])
    V = from_dict(raw).jump_system().intensity
    assert V[0, 0, 4:8].tolist() == [1.0] * 4 and V[1, 0, 4:8].tolist() == [0.0] * 4
    assert V[1, 0, 8:12].tolist() == [1.0] * 4


def test_with_value_and_coupling():
    cfg = from_dict(_raw(coupling={"c": 2.0, "p": 2.0, "background": 0.5}))
    cp = build_coupling(cfg)
    assert cp.c == 2.0 and cp.p == 2.0
    assert cfg.with_value("n", "32").grid.n == 32
    assert cfg.with_value("epsilon", "1e-4").numerics["epsilon"] == 1e-4
    with pytest.raises(ConfigError):
        cfg.with_value("nt", "zero")
