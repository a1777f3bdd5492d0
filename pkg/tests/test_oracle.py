import numpy as np
import pytest

from impulse_mfg.fokker_planck import solve_penalized_multi
from impulse_mfg.grid import TorusGrid
from impulse_mfg.oracle import OracleError, iterated_jump_count, l1_distance, simulate_limit, simulate_penalized
from impulse_mfg.qvi import JumpSystem


def _system(nt, lo=8, hi=16):
    g = TorusGrid(1, 32, 1.0, nt, 0.02)
    A = np.zeros(g.size)
    A[lo:hi] = 1.0
    return g, A, JumpSystem(g, [(16,)], 1.0, 1.0, np.broadcast_to(A, (nt + 1, g.size))[None])


def test_same_seed_bit_identical():
    g, _, js = _system(16)
    m0 = np.ones(g.size)
    a = simulate_penalized(m0, js, 1e-1, g, 5000, 7)
    b = simulate_penalized(m0, js, 1e-1, g, 5000, 7)
    c = simulate_penalized(m0, js, 1e-1, g, 5000, 8)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.hist, b.hist)
    assert not np.array_equal(a.positions, c.positions)


def test_counts_and_jump_location():
    g, _, js = _system(16)
    e = simulate_penalized(np.ones(g.size), js, 1e-2, g, 4000, 1)
    assert np.all(e.hist.sum(axis=1) == 4000)
    assert e.jumps_outside == 0
    assert e.jump_log.shape == (16, 1) and e.jump_log.sum() > 0
    assert e.density(g).shape == (17, 32)


def test_no_intensity_matches_heat():
    g = TorusGrid(1, 32, 1.0, 16, 0.02)
    js = JumpSystem(g, [(16,)], 1.0, 1.0, np.zeros((1, 17, 32)))
    m0 = 1 + np.cos(2 * np.pi * g.coordinates()[:, 0])
    e = simulate_penalized(m0, js, 1e-2, g, 100000, 3)
    assert e.jump_log.sum() == 0
    heat = solve_penalized_multi(m0, js, 1e-2, g).m
    assert l1_distance(heat, e, g) <= 0.05


def test_penalized_agrees_with_pde():
    g, _, js = _system(32)
    m0 = np.ones(g.size)
    ref = solve_penalized_multi(m0, js, 1e-2, g).m
    e = simulate_penalized(m0, js, 1e-2, g, 50000, 11)
    assert l1_distance(ref, e, g) <= 0.06


def test_iterated_jump_count():
    g = TorusGrid(1, 8, 1.0, 4, 0.02)
    A = np.zeros(8, dtype=bool)
    A[[1, 2, 3]] = True
    n = iterated_jump_count(A, (1,), g)
    assert n.tolist() == [0, 3, 2, 1, 0, 0, 0, 0]
    with pytest.raises(OracleError):
        iterated_jump_count(np.ones(8, dtype=bool), (1,), g)


def test_limit_never_rests_in_A():
    g, A, _ = _system(16)
    e = simulate_limit(np.ones(g.size), A.astype(bool), (16,), g, 20000, 5)
    assert np.all(e.hist[1:, A > 0] == 0)
    assert np.all(e.hist.sum(axis=1) == 20000)


def test_rate_too_large_raises():
    g, _, js = _system(4)
    with pytest.raises(OracleError):
        simulate_penalized(np.ones(g.size), js, 1e-9, g, 10, 0)


def test_sampling_error_decays_like_inverse_sqrt_N():
    g, _, js = _system(8)
    m0 = np.ones(g.size)
    Ns = np.array([2500, 10000, 40000, 160000])
    errs = []
    for N in Ns:
        d = []
        for s in range(4):
            a = simulate_penalized(m0, js, 1e-1, g, int(N), 2 * s).density(g, -1)
            b = simulate_penalized(m0, js, 1e-1, g, int(N), 2 * s + 1).density(g, -1)
            d.append(g.h * np.abs(a - b).sum())
        errs.append(np.mean(d))
    slope = np.polyfit(np.log(Ns), np.log(errs), 1)[0]
    assert -0.7 <= slope <= -0.3
