import numpy as np
import pytest

from glcontrol.acceptance import DESK_GEOMETRY, SMALL_GEOMETRY, desk_setup
from glcontrol.assembly import assemble
from glcontrol.evolution import TimeGrid
from glcontrol.geometry import build_eta0, build_mesh
from glcontrol.params import Params
from glcontrol.weights import eval_weights

ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def small():
    """~37-DOF mesh with a 4-step grid: cheap enough for dense oracles."""
    mesh = build_mesh(SMALL_GEOMETRY, 0.35, 0)
    ops = assemble(mesh)
    return {"mesh": mesh, "ops": ops, "grid": TimeGrid(1.0, 4), "geom": SMALL_GEOMETRY}


@pytest.fixture(scope="session")
def small_weights(small):
    p = Params()
    eta = build_eta0(small["mesh"], small["geom"])
    return eval_weights(small["mesh"], eta, p, small["grid"])


@pytest.fixture(scope="session")
def desk():
    mesh, ops, eta, grid, wset = desk_setup()
    return {"mesh": mesh, "ops": ops, "eta": eta, "grid": grid, "wset": wset, "geom": DESK_GEOMETRY}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
