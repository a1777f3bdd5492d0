import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from impulse_mfg.grid import TorusGrid
from impulse_mfg.qvi import JumpSystem

ACCEPTANCE = []

settings.register_profile("pkg", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pkg")


def standard_grid(nu=0.02):
    return TorusGrid(d=1, n=32, T=1.0, nt=64, nu=nu)


def standard_mask(grid):
    A = np.zeros(grid.size, dtype=bool)
    A[8:16] = True
    return A


def standard_system(grid=None, k0=1.0):
    grid = grid or standard_grid()
    A = standard_mask(grid)
    V = np.broadcast_to(A.astype(np.float64), (grid.nt + 1, grid.size))[None]
    return JumpSystem(grid, [(16,)], k0, k0, V)


@pytest.fixture
def grid1d():
    return standard_grid()


@pytest.fixture
def js1d(grid1d):
    return standard_system(grid1d)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
