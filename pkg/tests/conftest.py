# tests/conftest.py

import numpy as np
import pytest

from app.model import Dipole, LJSite, MoleculeBlock, Quadrupole, Species
from app.potentials import KernelFactory


@pytest.fixture(autouse=True)
def restore_kernel_factory():
    """
    Fixture to restore KernelFactory's registered kernels after each test, so a
    test that registers its own kernel does not leak into the others.
    """
    saved = dict(KernelFactory._kernels)
    yield
    KernelFactory._kernels.clear()
    KernelFactory._kernels.update(saved)


@pytest.fixture
def rng():
    """Seeded generator; every test gets the same stream."""
    return np.random.default_rng(20240607)


@pytest.fixture
def lj_table():
    """Species table with one single-site LJ species (sigma = epsilon = m = 1)."""
    return (Species.single_site(),)


@pytest.fixture
def polar_species():
    """
    A rigid two-centre LJ molecule carrying a dipole and a quadrupole, with three
    distinct principal moments so it rotates freely about every axis.
    """
    return Species.from_point_masses(
        0, "polar",
        masses=[0.5, 0.5, 0.2],
        positions=[(0.0, 0.0, -0.4), (0.0, 0.0, 0.4), (0.3, 0.0, 0.0)],
        lj_sites=(LJSite((0.0, 0.0, -0.4), 1.0, 1.0), LJSite((0.0, 0.0, 0.4), 1.0, 1.0)),
        dipoles=(Dipole((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 1.2),),
        quadrupoles=(Quadrupole((0.3, 0.0, 0.0), (1.0, 0.0, 0.0), 0.8),),
    )


def random_block(rng, n, box, min_distance=0.0, species=0):
    """
    n molecules uniformly in `box` with small random velocities; candidates closer
    than `min_distance` (minimum image) to an accepted molecule are redrawn.
    """
    box = np.asarray(box, dtype=float)
    positions = []
    while len(positions) < n:
        candidate = rng.uniform(0.0, 1.0, 3) * box
        if min_distance > 0.0 and positions:
            d = np.asarray(positions) - candidate
            d -= box * np.round(d / box)
            if np.min(np.einsum("ij,ij->i", d, d)) < min_distance ** 2:
                continue
        positions.append(candidate)
    return MoleculeBlock(
        ids=np.arange(n, dtype=np.int64),
        species=np.full(n, species, dtype=np.int64),
        r=np.array(positions).reshape(-1, 3),
        v=rng.normal(0.0, 0.5, (n, 3)),
        q=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        j=np.zeros((n, 3)),
    )


def random_orientations(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)
