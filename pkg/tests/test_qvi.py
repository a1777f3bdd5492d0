import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from impulse_mfg.grid import TorusGrid
from impulse_mfg.qvi import (
    HypothesisViolation,
    JumpSystem,
    apply_M,
    backward_heat,
    qvi_residuals,
    solve_constrained_equality,
    solve_obstacle_step,
    solve_qvi,
    solve_stationary_qvi,
)


def _dense_lcp(A, b, psi):
    """Exhaustive active-set search for u <= psi, b - A u >= 0, min(.,.) = 0."""
    n = b.size
    for bits in itertools.product((False, True), repeat=n):
        act = np.array(bits)
        u = psi.copy()
        free = ~act
        if free.any():
            u[free] = np.linalg.solve(A[np.ix_(free, free)], b[free] - A[np.ix_(free, act)] @ psi[act])
        r = b - A @ u
        if np.all(u <= psi + 1e-12) and np.all(r >= -1e-12) and np.all(np.abs(np.minimum(psi - u, r)) < 1e-10):
            return u
    raise AssertionError("no complementary active set")


def _dense_qvi(n, nt, nu, f, offsets, costs):
    h, dt = 1.0 / n, 1.0 / nt
    L = (np.roll(np.eye(n), 1, axis=1) + np.roll(np.eye(n), -1, axis=1) - 2 * np.eye(n)) / h**2
    A = np.eye(n) / dt - nu * L
    u = np.full((nt + 1, n), np.inf)
    u[-1] = 0.0
    for _ in range(200):
        Mu = np.min([c + np.roll(u, -o, axis=1) for o, c in zip(offsets, costs)], axis=0)
        new = np.zeros_like(u)
        for i in range(nt - 1, -1, -1):
            new[i] = _dense_lcp(A, f[i] + new[i + 1] / dt, np.minimum(Mu[i], 1e30))
        if np.max(np.abs(new - u)) < 1e-13:
            return new
        u = new
    raise AssertionError("dense QVI did not settle")


@pytest.fixture
def tiny():
    g = TorusGrid(1, 8, 1.0, 4, 0.05)
    x = g.coordinates()[:, 0]
    f = np.broadcast_to(3.0 * np.exp(-((x - 0.25) ** 2) / (2 * 0.1**2)), (5, 8)).copy()
    js = JumpSystem(g, [(4,), (2,)], np.array([[0.3] * 8, [0.25] * 8]), 0.25)
    return g, f, js


def test_matches_exhaustive_lcp(tiny):
    g, f, js = tiny
    ref = _dense_qvi(8, 4, 0.05, f, [4, 2], [0.3, 0.25])
    sol = solve_qvi(js, f, g)
    assert np.max(np.abs(sol.u - ref)) < 1e-10


def test_frozen_reference_values(tiny):
    g, f, js = tiny
    sol = solve_qvi(js, f, g)
    expected = [0.35004236913934894, 0.5155516973025192, 0.4845106830324546, 0.4655516973025191,
                0.3214467387938888, 0.21555169730251, 0.1845106830324488, 0.22763075639489855]
    np.testing.assert_allclose(sol.u[0], expected, rtol=0, atol=1e-10)
    assert sol.active[0].astype(int).tolist() == [0, 1, 1, 1, 0, 0, 0, 0]


def test_constant_source_below_cost_is_linear(grid1d):
    c = 0.1
    js = JumpSystem(grid1d, [(16,)], 0.5, 0.5)
    f = np.full((grid1d.nt + 1, grid1d.size), c)
    sol = solve_qvi(js, f, grid1d)
    t = grid1d.times[:, None]
    assert np.max(np.abs(sol.u - c * (1.0 - t))) <= 1e-10
    assert not sol.active.any()


def test_zero_source_gives_zero(grid1d, js1d):
    sol = solve_qvi(js1d, np.zeros((grid1d.nt + 1, grid1d.size)), grid1d)
    assert np.max(np.abs(sol.u)) == 0.0


def test_obstacle_step_examples():
    g = TorusGrid(1, 16, 1.0, 8, 0.02)
    z = np.zeros(g.size)
    u = solve_obstacle_step(np.ones(g.size), z, np.full(g.size, 1e30), g)
    np.testing.assert_allclose(u, g.dt, atol=1e-13)
    u = solve_obstacle_step(np.ones(g.size), z, z, g)
    assert np.max(np.abs(u)) <= 1e-13
    u = solve_obstacle_step(np.ones(g.size), z, np.full(g.size, np.inf), g)
    np.testing.assert_allclose(u, g.dt, atol=1e-13)
    with pytest.raises(ValueError):
        solve_obstacle_step(np.ones(g.size), z, np.full(g.size, np.nan), g)


def test_apply_M_constant_and_ties(grid1d):
    js = JumpSystem(grid1d, [(8,), (16,)], 0.3, 0.3)
    Mu, arg = apply_M(js, np.full(grid1d.size, 2.0))
    np.testing.assert_allclose(Mu, 2.3)
    assert np.all(arg == 0)
    u = np.arange(grid1d.size, dtype=float)
    Mu, _ = apply_M(js, u)
    expected = 0.3 + np.minimum(np.roll(u, -8), np.roll(u, -16))
    np.testing.assert_allclose(Mu, expected)


def test_backward_heat_constant(grid1d):
    u = backward_heat(np.full((grid1d.nt + 1, grid1d.size), 2.0), grid1d)
    np.testing.assert_allclose(u[:, 0], 2.0 * (1 - grid1d.times), atol=1e-12)


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_random_sources_monotone_feasible_complementary(seed):
    rng = np.random.default_rng(seed)
    g = TorusGrid(1, 32, 1.0, 32, 0.02)
    f = rng.uniform(0, 4, (g.nt + 1, g.size))
    js = JumpSystem(g, [(16,), (5,)], rng.uniform(0.2, 0.6, (2, g.size)), 0.2)
    sol = solve_qvi(js, f, g)
    assert sol.monotone and sol.max_increase <= 1e-10
    assert sol.feasibility <= 1e-8
    assert sol.complementarity <= 1e-8
    comp, feas = qvi_residuals(js, sol.u, f, g)
    assert comp <= 1e-8 and feas <= 1e-8


def test_source_monotonicity(grid1d, js1d):
    rng = np.random.default_rng(3)
    f1 = rng.uniform(0, 2, (grid1d.nt + 1, grid1d.size))
    f2 = f1 + rng.uniform(0, 1, f1.shape)
    u1 = solve_qvi(js1d, f1, grid1d).u
    u2 = solve_qvi(js1d, f2, grid1d).u
    assert np.all(u2 >= u1 - 1e-10)


def test_perturbation_stability(grid1d, js1d):
    rng = np.random.default_rng(5)
    f = rng.uniform(0, 2, (grid1d.nt + 1, grid1d.size))
    base = solve_qvi(js1d, f, grid1d).u
    for eta in (1e-2, 1e-3):
        df = eta * rng.uniform(-1, 1, f.shape)
        u = solve_qvi(js1d, f + df, grid1d).u
        assert np.max(np.abs(u - base)) <= np.max(np.abs(df)) * 1.0 + 1e-12


def test_lower_bound_rejected(grid1d, js1d):
    f = np.zeros((grid1d.nt + 1, grid1d.size))
    f[0, 0] = -10.0
    with pytest.raises(ValueError):
        solve_qvi(js1d, f, grid1d, lower_bound=1.0)


def test_stationary_constant_source():
    g = TorusGrid(1, 32, 1.0, 1, 0.02)
    js = JumpSystem(g, [(16,)], 0.4, 0.4)
    u, active, info = solve_stationary_qvi(js, np.full(g.size, 0.7), 2.0, g)
    np.testing.assert_allclose(u, 0.35, atol=1e-10)
    assert not active.any()
    assert info["complementarity_residual"] <= 1e-10


def test_stationary_random_residuals():
    rng = np.random.default_rng(11)
    g = TorusGrid(1, 32, 1.0, 1, 0.02)
    js = JumpSystem(g, [(16,), (7,)], 0.2, 0.2)
    u, active, info = solve_stationary_qvi(js, rng.uniform(0, 5, g.size), 1.0, g)
    assert info["monotone"]
    assert info["feasibility_violation"] <= 1e-8
    assert info["complementarity_residual"] <= 1e-8
    assert active.any()


def test_constrained_equality_residuals(js1d):
    standard_system = js1d
    g = standard_system.grid
    f = np.ones((g.nt + 1, g.size))
    sol = solve_constrained_equality(standard_system, f, g)
    A = standard_system.jump_set()[:-1]
    u = sol.u
    jumped = np.roll(u, -standard_system.jumps[0].offset[0], axis=1)
    gap = standard_system.cost[0] + jumped - u
    assert np.max(np.abs(gap[:-1][A])) <= 1e-8


def test_constrained_equality_cycle_raises(grid1d):
    V = np.ones((1, grid1d.nt + 1, grid1d.size))
    js = JumpSystem(grid1d, [(16,)], 1.0, 1.0, V)
    with pytest.raises(HypothesisViolation):
        solve_constrained_equality(js, np.ones((grid1d.nt + 1, grid1d.size)), grid1d)
