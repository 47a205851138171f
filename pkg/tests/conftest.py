"""Shared fixtures: the golden two-level transverse-magnetic setup."""

import numpy as np
import pytest

from maxbloch import profile_builder as pb
from maxbloch import quantum as qu
from maxbloch import spectral as sp
from maxbloch.domain import Grid


def periodized_gaussian(grid, x0, y0, width):
    """Smooth periodic bump: sum of Gaussian translates over one period ring."""
    xs, ys, _ = grid.mesh()
    env = np.zeros(grid.shape)
    for mx in (-1, 0, 1):
        for my in (-1, 0, 1):
            env += np.exp(-(((xs - x0 + grid.lx * mx) ** 2)
                            + (ys - y0 + grid.ly * my) ** 2) / (2 * width ** 2))
    return env


def periodized_gaussian_dy(grid, x0, y0, width):
    """Analytic y-derivative of :func:`periodized_gaussian`."""
    xs, ys, _ = grid.mesh()
    env = np.zeros(grid.shape)
    for mx in (-1, 0, 1):
        for my in (-1, 0, 1):
            dy = ys - y0 + grid.ly * my
            env += -dy / width ** 2 * np.exp(
                -(((xs - x0 + grid.lx * mx) ** 2) + dy ** 2) / (2 * width ** 2))
    return env


def golden_system(gamma=1.0, dipole=1.0, w12=0.3):
    return qu.LevelSystem.tm([1.0, 2.0], gamma, 1.0,
                             [[0.0, dipole], [dipole, 0.0]],
                             pauli_upper=[[0.0, w12], [0.0, 0.0]])


def golden_lattice(a_max=5):
    return sp.PhaseLattice(k=[np.sqrt(2.0)], a=2.0, c_dioph=0.7, a_max=a_max)


def resonant_system(gamma=1.0, dipole=1.0, w12=0.3):
    """Two-level species whose transition energy matches the k=1 lattice."""
    return qu.LevelSystem.tm([0.5, 1.5], gamma, 1.0,
                             [[0.0, dipole], [dipole, 0.0]],
                             pauli_upper=[[0.0, w12], [0.0, 0.0]])


def resonant_lattice(a_max=5):
    return sp.PhaseLattice(k=[1.0], a=1.0, c_dioph=0.5, a_max=a_max)


def golden_initial_profiles(sys_, lat, grid, amplitude=0.25, width=0.6):
    env = amplitude * periodized_gaussian(grid, np.pi, np.pi, width)
    u1 = np.zeros(grid.shape + (6,), dtype=complex)
    u1[..., sp.EZ] = env
    u1[..., sp.BY] = -env
    pops = {(0,): np.broadcast_to(qu.gibbs_populations(sys_),
                                  grid.shape + (sys_.n_levels,)).astype(complex)}
    return pb.lift_initial_data(sys_, lat, grid, {(1,): u1, (-1,): np.conj(u1)}, pops)


@pytest.fixture(scope="session")
def golden():
    sys_ = golden_system()
    lat = golden_lattice()
    grid = Grid(32, 32, 1)
    profiles = golden_initial_profiles(sys_, lat, grid)
    pipeline = pb.TmProfilePipeline(pb.reduced_state_from_leading(profiles), dt_slow=2e-3)
    return {"sys": sys_, "lat": lat, "grid": grid, "profiles": profiles,
            "pipeline": pipeline, "ntheta": 16}


@pytest.fixture(scope="session")
def small_grid():
    return Grid(16, 8, 1)
