import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from impulse_mfg.fokker_planck import (
    check_fp_solution,
    duality_lp,
    duality_value,
    epsilon_sweep,
    exchange_matrix,
    fp_step_single,
    solve_penalized_multi,
    solve_penalized_single,
    solve_penalized_stationary,
)
from impulse_mfg.grid import LatticeJump, TorusGrid, integrate
from impulse_mfg.qvi import JumpSystem


def _dense_run(n, nt, nu, eps, A, offset, m0):
    h, dt = 1.0 / n, 1.0 / nt
    L = (np.roll(np.eye(n), 1, 1) + np.roll(np.eye(n), -1, 1) - 2 * np.eye(n)) / h**2
    S = np.roll(np.eye(n), offset, axis=0)
    E = (np.diag(A) - S @ np.diag(A)) / eps
    m = [m0]
    for _ in range(nt):
        m.append(np.linalg.solve(np.eye(n) - dt * nu * L + dt * E, m[-1]))
    return np.array(m)


@pytest.fixture
def small():
    n, nt = 8, 8
    g = TorusGrid(1, n, 1.0, nt, 0.05)
    A = np.zeros(n)
    A[2:4] = 1.0
    js = JumpSystem(g, [(4,)], 1.0, 1.0, np.broadcast_to(A, (nt + 1, n))[None])
    m0 = 1 + 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    return g, A, js, m0


def test_matches_dense_march(small):
    g, A, js, m0 = small
    ref = _dense_run(8, 8, 0.05, 0.1, A, 4, m0)
    run = solve_penalized_multi(m0, js, 0.1, g)
    assert np.max(np.abs(run.m - ref)) <= 1e-13
    pen = g.dt * g.h * np.sum(A * ref[1:]) / 0.1
    assert abs(run.penalty_integral - pen) <= 1e-13


def test_frozen_final_slice(small):
    g, A, js, m0 = small
    run = solve_penalized_multi(m0, js, 0.1, g)
    expected = [1.3196857169575875, 0.774011405853417, 0.18586052254103888, 0.16821768725358205,
                0.680314283042413, 1.2259885941465833, 1.814139477458962, 1.8317823127464186]
    np.testing.assert_allclose(run.m[-1], expected, rtol=0, atol=1e-12)
    assert run.penalty_integral == pytest.approx(0.5864125309249232, abs=1e-12)


def test_lp_agrees_with_identity(small):
    g, A, js, m0 = small
    run = solve_penalized_multi(m0, js, 0.1, g)
    lp = duality_lp(run.m, m0, js, g)
    ident = duality_value(run.m, m0, js, g)
    assert not lp.pinned
    assert lp.value == pytest.approx(ident, abs=1e-9)
    assert ident == pytest.approx(-run.penalty_integral, rel=1e-10)


def test_exchange_columns_sum_to_zero(grid1d):
    rng = np.random.default_rng(0)
    V = rng.uniform(0, 0.5, (2, grid1d.size))
    E = exchange_matrix(grid1d, [LatticeJump((16,)), LatticeJump((5,))], V, 0.01).toarray()
    np.testing.assert_allclose(E.sum(axis=0), 0.0, atol=1e-10)
    off = E - np.diag(np.diag(E))
    assert off.max() <= 0.0


def test_mass_conserved_and_positive(grid1d, js1d):
    m0 = 1 + 0.9 * np.sin(2 * np.pi * grid1d.coordinates()[:, 0])
    run = solve_penalized_multi(m0, js1d, 1e-3, grid1d)
    mass = integrate(m0, grid1d)
    assert np.max(np.abs(run.mass_trace - mass)) <= 1e-10 * mass
    assert run.m.min() >= -1e-10 * m0.max()


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), eps=st.sampled_from([1e-1, 1e-3, 1e-6]))
def test_positivity_random_configurations(seed, eps):
    rng = np.random.default_rng(seed)
    g = TorusGrid(1, 32, 1.0, 32, rng.uniform(0.001, 0.05))
    A = rng.random((g.nt + 1, g.size)) < 0.3
    js = JumpSystem(g, [(int(rng.integers(1, 32)),)], 1.0, 1.0, A.astype(float)[None])
    m0 = rng.random(g.size) * (rng.random(g.size) < 0.5)
    m0[0] += 1.0
    run = solve_penalized_multi(m0, js, eps, g)
    assert run.m.min() >= -1e-10 * m0.max()
    ref = integrate(m0, g)
    assert np.max(np.abs(run.mass_trace - ref)) <= 1e-10 * ref


def test_linearity(grid1d, js1d):
    rng = np.random.default_rng(1)
    a, b = rng.random(grid1d.size), rng.random(grid1d.size)
    ma = solve_penalized_multi(a, js1d, 1e-2, grid1d).m
    mb = solve_penalized_multi(b, js1d, 1e-2, grid1d).m
    mab = solve_penalized_multi(2 * a + 3 * b, js1d, 1e-2, grid1d).m
    np.testing.assert_allclose(mab, 2 * ma + 3 * mb, atol=1e-12)


def test_single_equals_multi(grid1d, js1d):
    m0 = np.ones(grid1d.size)
    A = js1d.jump_set()
    s = solve_penalized_single(m0, A, (16,), 1e-2, grid1d).m
    mlt = solve_penalized_multi(m0, js1d, 1e-2, grid1d).m
    np.testing.assert_array_equal(s, mlt)
    step = fp_step_single(m0, A[0], (16,), 1e-2, grid1d)
    np.testing.assert_allclose(step, s[1], atol=1e-14)


def test_negative_initial_density_rejected(grid1d, js1d):
    with pytest.raises(ValueError):
        solve_penalized_multi(-np.ones(grid1d.size), js1d, 1e-2, grid1d)


def test_stationary_closed_form():
    g = TorusGrid(1, 32, 1.0, 1, 0.02)
    js = JumpSystem(g, [(16,)], 1.0, 1.0, np.zeros((1, g.size)))
    m, info = solve_penalized_stationary(np.full(g.size, 3.0), js, 2.0, 1e-3, g)
    np.testing.assert_allclose(m, 1.5, atol=1e-12)
    assert abs(info["mass_balance_error"]) <= 1e-10


def test_stationary_mass_balance_with_jumps():
    g = TorusGrid(1, 32, 1.0, 1, 0.02)
    A = np.zeros(g.size)
    A[4:12] = 1.0
    js = JumpSystem(g, [(16,)], 1.0, 1.0, A[None])
    rho = 1 + np.cos(2 * np.pi * g.coordinates()[:, 0])
    m, info = solve_penalized_stationary(rho, js, 0.5, 1e-4, g)
    assert abs(info["mass_balance_error"]) <= 1e-10 * integrate(rho, g)
    assert m.min() >= 0
    assert m[A > 0].max() < 0.05 * m.max()


def test_epsilon_sweep_vanishes_on_A(grid1d, js1d):
    m0 = np.ones(grid1d.size)
    sweep = epsilon_sweep(m0, js1d, [1e-1, 1e-2, 1e-3, 1e-4, 1e-5], grid1d)
    assert np.all(np.diff(sweep.int_A) < 0)
    assert 0.8 <= sweep.slope <= 1.2
    assert sweep.ladder_monotone()
    assert sweep.residual_on_A[-1] <= 1e-2 * np.max(sweep.m)
    with pytest.raises(ValueError):
        epsilon_sweep(m0, js1d, [1e-3, 1e-2], grid1d)


def test_duality_identity_standard(grid1d, js1d):
    m0 = 1 + 0.5 * np.cos(2 * np.pi * grid1d.coordinates()[:, 0])
    for eps in (1e-1, 1e-2, 1e-3):
        run = solve_penalized_multi(m0, js1d, eps, grid1d)
        D = duality_value(run.m, m0, js1d, grid1d)
        assert abs(D + run.penalty_integral) <= 1e-8 * abs(run.penalty_integral)


def test_checker_accepts_limit_and_rejects_heat(grid1d, js1d):
    m0 = np.ones(grid1d.size)
    good = solve_penalized_multi(m0, js1d, 1e-6, grid1d).m
    rep = check_fp_solution(good, m0, js1d, grid1d, n_battery=8)
    assert rep["pass"]
    free = JumpSystem(grid1d, [(16,)], 1.0, 1.0, np.zeros((1, grid1d.nt + 1, grid1d.size)))
    heat = solve_penalized_multi(m0, free, 1.0, grid1d).m
    rep = check_fp_solution(heat, m0, js1d, grid1d, n_battery=8)
    assert not rep["pass_max_on_A"]
