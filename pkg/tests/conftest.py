import numpy as np
import pytest

from fracsource.catalogue import catalogue_sigma
from fracsource.dynamics import TimeGrid
from fracsource.mesh_fem import FractionalOrder, assemble_mass, assemble_stiffness, build_mesh, make_mask
from fracsource.spectral import solve_eigenbasis


class Desk:
    """N=128, s=0.75 problem shared by the control, Volterra and reconstruction tests."""

    def __init__(self, N=128, s=0.75, n_star=25):
        self.s = s
        self.mesh = build_mesh(N)
        self.mass = assemble_mass(self.mesh)
        self.stiffness = assemble_stiffness(self.mesh, FractionalOrder(s))
        self.basis = solve_eigenbasis(self.mass, self.stiffness, n_star, mesh=self.mesh, s=s)
        self.mask = make_mask(self.mesh, -0.75, 0.75)
        self.grid = TimeGrid(1.0, 1000, 40)


@pytest.fixture(scope="session")
def desk():
    return Desk()


@pytest.fixture(scope="session")
def sigma_exp():
    return catalogue_sigma("exp")


@pytest.fixture(scope="session")
def sigma_one():
    return catalogue_sigma("one")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("FRACSOURCE_CACHE", str(tmp_path / "cache"))
