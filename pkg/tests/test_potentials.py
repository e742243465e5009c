# tests/test_potentials.py

"""
Unit tests for the pair kernels: Lennard-Jones forms, mixing, point polarities,
reaction field, tail corrections and whole-molecule evaluation.

Forces are checked against central finite differences of the energy, torques
against finite rotations, and multipole energies against clouds of point charges.
"""

import itertools
import logging
import math

import numpy as np
import pytest
from scipy.integrate import quad

from app.exceptions import ConfigurationError, SingularOverlapError
from app.model import Charge, LJSite, Species, rotation_matrices
from app.potentials import (
    ChargeChargeKernel,
    ForceField,
    KernelFactory,
    MixingTable,
    PolaritySite,
    SwappedKernel,
    electrostatic_pair,
    lj_energy,
    lj_pair,
    lj_tail_correction,
    lj_tail_terms,
    ljts_pair,
    mix,
    reaction_field_correction,
    reaction_field_factor,
    reaction_field_self_energy,
    tail_correction_for_system,
)
from tests.conftest import random_orientations

H = 1e-6
KINDS = ("charge", "dipole", "quadrupole")
STRENGTH = {"charge": 0.8, "dipole": 1.3, "quadrupole": 0.9}


def unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def rotate(vectors, axis, angle):
    """Rodrigues rotation of (n, 3) vectors about a fixed unit axis."""
    axis = np.broadcast_to(axis, vectors.shape)
    dot = np.einsum("ij,ij->i", axis, vectors)[:, None]
    return vectors * math.cos(angle) + np.cross(axis, vectors) * math.sin(angle) + axis * dot * (1 - math.cos(angle))


def rotation_about(axis, angle):
    x, y, z = axis
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k


def finite_difference_force(energy, r_vec):
    """-dU/dr_vec by central differences, for a vectorised energy(r_vec)."""
    grad = np.zeros_like(r_vec)
    for k in range(3):
        step = np.zeros(3)
        step[k] = H
        grad[:, k] = (energy(r_vec + step) - energy(r_vec - step)) / (2 * H)
    return -grad


def assert_vectors_close(actual, expected, rtol=1e-5, atol=1e-8):
    error = np.linalg.norm(actual - expected, axis=-1)
    scale = np.linalg.norm(expected, axis=-1)
    assert np.all(error <= rtol * scale + atol), f"max error {error.max():.3e}"


# -----------------------------------------------------------------------------------
# Lennard-Jones
# -----------------------------------------------------------------------------------

def test_lj_zero_at_sigma():
    """(sigma/r)^12 = (sigma/r)^6 at r = sigma."""
    assert float(lj_pair(1.0, 1.0, [1.0, 0.0, 0.0]).u) == 0.0


def test_lj_minimum():
    """u = -epsilon and no force at r = 2^(1/6) sigma."""
    # Act
    result = lj_pair(1.0, 1.0, [2.0 ** (1.0 / 6.0), 0.0, 0.0])

    # Assert
    assert float(result.u) == pytest.approx(-1.0, rel=1e-14)
    assert np.linalg.norm(result.f) < 1e-12


def test_lj_value_at_cutoff():
    """u(2.5) of the 12-6 potential."""
    assert float(lj_pair(1.0, 1.0, [0.0, 2.5, 0.0]).u) == pytest.approx(-1.631689e-2, rel=1e-6)


def test_lj_repulsive_force_points_away_from_b():
    """Inside the minimum the force on a points along r_a - r_b."""
    result = lj_pair(1.0, 1.0, [0.9, 0.0, 0.0])
    assert result.f[0] > 0.0
    assert float(result.virial) == pytest.approx(0.9 * result.f[0])


def test_lj_singular_overlap_raises():
    """r = 0 is an error, never infinity."""
    with pytest.raises(SingularOverlapError):
        lj_pair(1.0, 1.0, [0.0, 0.0, 0.0])


def test_lj_near_overlap_is_clamped_with_warning(caplog):
    """Below 1e-6 sigma the force magnitude is clamped and a warning is logged."""
    # Act
    with caplog.at_level(logging.WARNING, logger="app.potentials"):
        result = lj_pair(1.0, 1.0, [1e-9, 0.0, 0.0])

    # Assert
    assert np.all(np.isfinite(result.f))
    assert "near overlap" in caplog.text


@pytest.mark.parametrize("r, expected", [(2.5, 0.0), (3.0, 0.0), (1.0, 1.631689e-2)])
def test_ljts_examples(r, expected):
    """Zero at and beyond the cutoff, shifted inside."""
    # Act
    result = ljts_pair(1.0, 1.0, [r, 0.0, 0.0], 2.5)

    # Assert
    assert float(result.u) == pytest.approx(expected, rel=1e-6, abs=1e-15)
    if r >= 2.5:
        assert np.all(result.f == 0.0)


def test_ljts_is_continuous_at_cutoff():
    """Energy just inside rc is within |du/dr| dr of zero."""
    dr = 1e-9
    u = float(ljts_pair(1.0, 1.0, [2.5 - dr, 0.0, 0.0], 2.5).u)
    slope = abs(float(lj_pair(1.0, 1.0, [2.5, 0.0, 0.0]).f[0]))
    assert abs(u) <= 2 * slope * dr + 1e-15


def test_ljts_rejects_non_positive_cutoff():
    with pytest.raises(ConfigurationError):
        ljts_pair(1.0, 1.0, [1.0, 0.0, 0.0], 0.0)


@pytest.mark.parametrize("shifted", [False, True])
def test_lj_forces_match_finite_differences(rng, shifted):
    """f = -grad u over 1000 random separations."""
    # Arrange
    r_vec = unit_vectors(rng, 1000) * rng.uniform(0.85, 2.45, (1000, 1))
    sigma, eps, rc = 1.1, 0.7, 2.5 * 1.1

    def energy(x):
        return ljts_pair(sigma, eps, x, rc).u if shifted else lj_pair(sigma, eps, x).u

    # Act
    result = ljts_pair(sigma, eps, r_vec, rc) if shifted else lj_pair(sigma, eps, r_vec)

    # Assert
    assert_vectors_close(result.f, finite_difference_force(energy, r_vec))


# -----------------------------------------------------------------------------------
# Mixing
# -----------------------------------------------------------------------------------

@pytest.mark.parametrize("args, expected", [
    ((1, 1, 1, 1, 1.0), (1.0, 1.0)),
    ((1, 3, 4, 9, 1.0), (2.0, 6.0)),
    ((1, 3, 4, 9, 0.5), (2.0, 3.0)),
])
def test_mix_examples(args, expected):
    """Arithmetic sigma, geometric epsilon scaled by eta."""
    assert mix(*args) == pytest.approx(expected)


def test_mix_is_symmetric():
    assert mix(1.2, 0.8, 0.3, 2.0, 0.9) == mix(0.8, 1.2, 2.0, 0.3, 0.9)


def test_mixing_table_applies_eta_to_unlike_species_only():
    """eta scales only the cross interaction."""
    # Arrange
    species = (Species.single_site(0, sigma=1.0, epsilon=1.0), Species.single_site(1, sigma=2.0, epsilon=4.0))

    # Act
    table = MixingTable(species, {(1, 0): 0.5})

    # Assert
    assert table.get(0, 0, 1, 0) == pytest.approx((1.5, 1.0))
    assert table.get(1, 0, 0, 0) == pytest.approx((1.5, 1.0))
    assert table.get(1, 0, 1, 0) == pytest.approx((2.0, 4.0))


# -----------------------------------------------------------------------------------
# Point polarities
# -----------------------------------------------------------------------------------

def test_two_charges():
    """+1 and -1 at r = 2: u = -0.5."""
    a = PolaritySite("charge", np.zeros(3), 1.0)
    b = PolaritySite("charge", np.array([2.0, 0.0, 0.0]), -1.0)
    assert float(electrostatic_pair(a, b)[0].u) == pytest.approx(-0.5)


def test_head_to_tail_dipoles():
    """Collinear dipoles along r at r = 2: u = -2 mu^2 / r^3."""
    axis = np.array([1.0, 0.0, 0.0])
    a = PolaritySite("dipole", np.zeros(3), 1.0, axis)
    b = PolaritySite("dipole", np.array([2.0, 0.0, 0.0]), 1.0, axis)
    assert float(electrostatic_pair(a, b)[0].u) == pytest.approx(-0.25)


@pytest.mark.parametrize("kind_a, kind_b", list(itertools.product(KINDS, KINDS)))
def test_zero_strength_gives_nothing(kind_a, kind_b):
    """A vanishing moment on one side switches the interaction off."""
    # Arrange
    axis = np.array([0.0, 0.6, 0.8])
    a = PolaritySite(kind_a, np.zeros(3), 0.0, axis)
    b = PolaritySite(kind_b, np.array([0.3, 1.1, -0.4]), 1.0, axis)

    # Act
    result, tau_a, tau_b = electrostatic_pair(a, b)

    # Assert
    assert float(result.u) == 0.0
    assert np.all(result.f == 0.0)
    assert np.all(tau_a == 0.0) and np.all(tau_b == 0.0)


@pytest.mark.parametrize("kind_a, kind_b", list(itertools.product(KINDS, KINDS)))
def test_polarity_forces_and_torques_match_finite_differences(rng, kind_a, kind_b):
    """Forces are -grad u; torques are -du/dphi for a rotation of each axis."""
    # Arrange
    n = 1000
    r_vec = unit_vectors(rng, n) * rng.uniform(1.0, 3.0, (n, 1))
    e_a, e_b = unit_vectors(rng, n), unit_vectors(rng, n)

    def energy(x, ea=e_a, eb=e_b):
        a = PolaritySite(kind_a, np.zeros(3), STRENGTH[kind_a], ea)
        b = PolaritySite(kind_b, np.zeros(3), STRENGTH[kind_b], eb)
        return electrostatic_pair(a, b, x)[0].u

    site_a = PolaritySite(kind_a, np.zeros(3), STRENGTH[kind_a], e_a)
    site_b = PolaritySite(kind_b, np.zeros(3), STRENGTH[kind_b], e_b)

    # Act
    result, tau_a, tau_b = electrostatic_pair(site_a, site_b, r_vec)

    # Assert
    assert_vectors_close(result.f, finite_difference_force(energy, r_vec))
    for axis in np.eye(3):
        d_a = (energy(r_vec, ea=rotate(e_a, axis, H)) - energy(r_vec, ea=rotate(e_a, axis, -H))) / (2 * H)
        d_b = (energy(r_vec, eb=rotate(e_b, axis, H)) - energy(r_vec, eb=rotate(e_b, axis, -H))) / (2 * H)
        assert np.allclose(tau_a @ axis, -d_a, rtol=1e-5, atol=1e-8)
        assert np.allclose(tau_b @ axis, -d_b, rtol=1e-5, atol=1e-8)
    # angular momentum balance about the origin
    balance = tau_a + tau_b + np.cross(r_vec, result.f)
    assert np.max(np.abs(balance)) < 1e-10


@pytest.mark.parametrize("kind_a, kind_b", [("dipole", "charge"), ("quadrupole", "charge"),
                                            ("quadrupole", "dipole")])
def test_reverse_ordering_uses_swapped_kernel(kind_a, kind_b):
    """Asking for (b, a) gives the same energy as (a, b) seen from the other side."""
    # Arrange
    r_vec = np.array([0.4, -1.3, 0.9])
    e_1, e_2 = np.array([0.0, 0.6, 0.8]), np.array([1.0, 0.0, 0.0])
    a = PolaritySite(kind_a, r_vec, 1.1, e_1)
    b = PolaritySite(kind_b, np.zeros(3), 0.7, e_2)

    # Act
    forward, tau_a, tau_b = electrostatic_pair(a, b)
    backward, tau_b2, tau_a2 = electrostatic_pair(b, a)

    # Assert
    assert isinstance(KernelFactory.create_kernel(kind_a, kind_b, 1.0, 1.0), SwappedKernel)
    assert float(backward.u) == pytest.approx(float(forward.u), rel=1e-13)
    assert backward.f == pytest.approx(-forward.f, rel=1e-12)
    assert tau_a2 == pytest.approx(tau_a, rel=1e-12, abs=1e-15)
    assert tau_b2 == pytest.approx(tau_b, rel=1e-12, abs=1e-15)


def charge_cloud(kind, position, axis, strength, d):
    """Point-charge representation: mu = q d, Q = 2 q d^2."""
    if kind == "charge":
        return [(position, strength)]
    if kind == "dipole":
        q = strength / d
        return [(position + 0.5 * d * axis, q), (position - 0.5 * d * axis, -q)]
    q = strength / (2 * d * d)
    return [(position + d * axis, q), (position, -2 * q), (position - d * axis, q)]


def cloud_energy(kind_a, kind_b, r_vec, e_a, e_b, d):
    total = 0.0
    for pa, qa in charge_cloud(kind_a, r_vec, e_a, STRENGTH[kind_a], d):
        for pb, qb in charge_cloud(kind_b, np.zeros(3), e_b, STRENGTH[kind_b], d):
            total += qa * qb / np.linalg.norm(pa - pb)
    return total


@pytest.mark.parametrize("kind_a, kind_b", [(a, b) for a, b in itertools.product(KINDS, KINDS)
                                            if (a, b) != ("charge", "charge")])
def test_multipole_energies_match_point_charge_limit(rng, kind_a, kind_b):
    """Closed forms agree with small charge clouds (d = 1e-3 r) to 1e-4 relative."""
    checked = 0
    while checked < 20:
        # Arrange
        r = rng.uniform(1.0, 3.0)
        r_vec = unit_vectors(rng, 1)[0] * r
        e_a, e_b = unit_vectors(rng, 1)[0], unit_vectors(rng, 1)[0]
        a = PolaritySite(kind_a, r_vec, STRENGTH[kind_a], e_a)
        b = PolaritySite(kind_b, np.zeros(3), STRENGTH[kind_b], e_b)
        closed = float(electrostatic_pair(a, b)[0].u)
        order = KINDS.index(kind_a) + KINDS.index(kind_b)
        scale = STRENGTH[kind_a] * STRENGTH[kind_b] / r ** (order + 1)
        if abs(closed) < 0.05 * scale:
            continue

        # Act
        if (kind_a, kind_b) == ("quadrupole", "quadrupole"):
            # cancellation of ~1/d^4 charge terms limits d; extrapolate d -> 0 instead
            d = 2e-2 * r
            oracle = (4 * cloud_energy(kind_a, kind_b, r_vec, e_a, e_b, d / 2)
                      - cloud_energy(kind_a, kind_b, r_vec, e_a, e_b, d)) / 3
        else:
            oracle = cloud_energy(kind_a, kind_b, r_vec, e_a, e_b, 1e-3 * r)

        # Assert
        assert closed == pytest.approx(oracle, rel=1e-4)
        checked += 1


def test_kernel_factory_rejects_duplicates_and_unknown_pairs():
    """Registering a pair twice or asking for an unknown kind fails with ValueError."""
    # Act & Assert
    with pytest.raises(ValueError, match="already registered"):
        KernelFactory.register_kernel("charge", "charge")(ChargeChargeKernel)
    with pytest.raises(ValueError, match="Unsupported polarity pair"):
        KernelFactory.create_kernel("charge", "octupole", 1.0, 1.0)


def test_kernel_factory_accepts_new_kernels():
    """A newly registered kind pair is created by the factory (removed again by the fixture)."""
    # Arrange
    @KernelFactory.register_kernel("charge", "screened")
    class Screened(ChargeChargeKernel):
        pass

    # Act
    kernel = KernelFactory.create_kernel("screened", "charge", 2.0, 3.0)

    # Assert
    assert isinstance(kernel, SwappedKernel)
    assert isinstance(kernel.inner, Screened)
    assert kernel.prefactor == 6.0


# -----------------------------------------------------------------------------------
# Reaction field
# -----------------------------------------------------------------------------------

def test_reaction_field_factor_limits():
    """Conducting boundary gives 1 / rc^3, vacuum gives 0."""
    assert reaction_field_factor(2.5, math.inf) == pytest.approx(1 / 15.625)
    assert reaction_field_factor(2.5, 1.0) == 0.0
    assert reaction_field_factor(2.0, 10.0) == pytest.approx(2 * 9 / 21 / 8)


def test_reaction_field_rejects_permittivity_below_one():
    with pytest.raises(ConfigurationError):
        reaction_field_factor(2.5, 0.5)


def test_reaction_field_parallel_dipoles():
    """mu = 1, parallel, r = 1, rc = 2.5, eps_rf -> inf: -1 / 15.625."""
    # Act
    result, tau_a, tau_b = reaction_field_correction(1.0, [0, 0, 1], 1.0, [0, 0, 1], [1.0, 0, 0], 2.5, math.inf)

    # Assert
    assert float(result.u) == pytest.approx(-0.064)
    assert np.all(result.f == 0.0)
    assert np.allclose(tau_a, 0.0) and np.allclose(tau_b, 0.0)


def test_reaction_field_vanishes_for_vacuum_and_zero_moments():
    r_vec = [1.0, 0.5, 0.0]
    assert float(reaction_field_correction(1.0, [0, 0, 1], 1.0, [0, 1, 0], r_vec, 2.5, 1.0)[0].u) == 0.0
    assert float(reaction_field_correction(0.0, [0, 0, 1], 1.0, [0, 1, 0], r_vec, 2.5, math.inf)[0].u) == 0.0


def test_reaction_field_only_inside_cutoff():
    result, tau_a, _ = reaction_field_correction(1.0, [0, 0, 1], 1.0, [0, 1, 0], [3.0, 0, 0], 2.5, math.inf)
    assert float(result.u) == 0.0
    assert np.all(tau_a == 0.0)


def test_reaction_field_self_energy():
    """-k_RF mu^2 / 2 per dipole."""
    assert reaction_field_self_energy([1.0, 2.0], 2.0, math.inf) == pytest.approx(-0.5 * 5.0 / 8.0)


# -----------------------------------------------------------------------------------
# Tail corrections
# -----------------------------------------------------------------------------------

def test_tail_vanishes_at_zero_density():
    assert lj_tail_correction(0.0, 1.0, 1.0, 2.5, 100) == (0.0, 0.0)


def test_tail_vanishes_for_huge_cutoff():
    energy, pressure = lj_tail_correction(0.6223, 1.0, 1.0, 1e3, 1)
    assert abs(energy) < 1e-8
    assert abs(pressure) < 1e-8


def test_tail_matches_quadrature():
    """Energy 2 pi rho int u r^2 dr and pressure -2/3 pi rho^2 int r^3 u' dr beyond rc."""
    # Arrange
    rho, rc = 0.6223, 2.5

    def du(r):
        return -24.0 * (2.0 * r ** -13 - r ** -7)

    energy_integral, _ = quad(lambda r: lj_energy(1.0, 1.0, r) * r * r, rc, np.inf, epsabs=1e-14, epsrel=1e-13)
    virial_integral, _ = quad(lambda r: du(r) * r ** 3, rc, np.inf, epsabs=1e-14, epsrel=1e-13)

    # Act
    energy, pressure = lj_tail_terms(rho, 1.0, 1.0, rc)

    # Assert
    assert energy == pytest.approx(2 * math.pi * rho * energy_integral, rel=1e-8)
    assert pressure == pytest.approx(-2.0 / 3.0 * math.pi * rho ** 2 * virial_integral, rel=1e-8)


def test_tail_for_system_reduces_to_single_species(lj_table):
    """One species: composition weights are 1."""
    # Act
    energy, pressure = tail_correction_for_system([500], 500 / 0.6223, MixingTable(lj_table), lj_table, 2.5)

    # Assert
    expected = lj_tail_correction(0.6223, 1.0, 1.0, 2.5, 500)
    assert energy == pytest.approx(expected[0], rel=1e-12)
    assert pressure == pytest.approx(expected[1], rel=1e-12)


# -----------------------------------------------------------------------------------
# Whole molecules
# -----------------------------------------------------------------------------------

def test_forcefield_single_site_matches_lj(lj_table):
    """For point molecules the batch result is the plain LJ pair."""
    # Arrange
    dr = np.array([[1.1, 0.2, -0.3], [0.0, 1.9, 0.4]])
    forcefield = ForceField(lj_table, 2.5)
    zeros = np.zeros(2, dtype=np.int64)

    # Act
    result = forcefield.evaluate(dr, zeros, zeros)

    # Assert
    expected = lj_pair(1.0, 1.0, dr)
    assert np.allclose(result.u, expected.u, rtol=1e-14)
    assert np.allclose(result.f, expected.f, rtol=1e-14)
    assert np.allclose(result.virial, expected.virial, rtol=1e-12)
    assert np.all(result.tau_i == 0.0) and np.all(result.tau_j == 0.0)


@pytest.mark.parametrize("reaction_field", [False, True])
def test_forcefield_molecule_forces_and_torques(rng, polar_species, reaction_field):
    """Rigid-molecule force, torques and virial against finite differences and balance laws."""
    # Arrange
    n = 200
    table = (polar_species,)
    forcefield = ForceField(table, 6.0, reaction_field=reaction_field, eps_rf=20.0)
    dr = unit_vectors(rng, n) * rng.uniform(2.2, 3.5, (n, 1))
    rot_i = rotation_matrices(random_orientations(rng, n))
    rot_j = rotation_matrices(random_orientations(rng, n))
    zeros = np.zeros(n, dtype=np.int64)

    def energy(x, ri=rot_i, rj=rot_j):
        return forcefield.evaluate(x, zeros, zeros, ri, rj).u

    # Act
    result = forcefield.evaluate(dr, zeros, zeros, rot_i, rot_j)

    # Assert
    assert_vectors_close(result.f, finite_difference_force(energy, dr))
    for axis in np.eye(3):
        plus, minus = rotation_about(axis, H), rotation_about(axis, -H)
        d_i = (energy(dr, ri=plus @ rot_i) - energy(dr, ri=minus @ rot_i)) / (2 * H)
        d_j = (energy(dr, rj=plus @ rot_j) - energy(dr, rj=minus @ rot_j)) / (2 * H)
        assert np.allclose(result.tau_i @ axis, -d_i, rtol=1e-5, atol=1e-7)
        assert np.allclose(result.tau_j @ axis, -d_j, rtol=1e-5, atol=1e-7)
    balance = result.tau_i + result.tau_j + np.cross(dr, result.f)
    assert np.max(np.abs(balance)) < 1e-9


def test_forcefield_virial_sums_site_site_terms():
    """Two-centre molecules: the virial is the sum of r_ab . f_ab over the four site pairs."""
    # Arrange
    dumbbell = Species.from_point_masses(
        0, "dumbbell",
        masses=[0.5, 0.5],
        positions=[(0.0, 0.0, -0.4), (0.0, 0.0, 0.4)],
        lj_sites=(LJSite((0.0, 0.0, -0.4), 1.0, 1.0), LJSite((0.0, 0.0, 0.4), 1.0, 1.0)),
    )
    forcefield = ForceField((dumbbell,), 6.0)
    dr = np.array([[1.3, 0.4, 0.9], [0.0, 2.1, -0.5]])
    identity = rotation_matrices(np.tile([1.0, 0.0, 0.0, 0.0], (2, 1)))
    zeros = np.zeros(2, dtype=np.int64)

    # Act
    result = forcefield.evaluate(dr, zeros, zeros, identity, identity)

    # Assert
    offsets = [np.array([0.0, 0.0, -0.4]), np.array([0.0, 0.0, 0.4])]
    expected = sum(lj_pair(1.0, 1.0, dr + da - db).virial for da in offsets for db in offsets)
    centre_based = np.einsum("ij,ij->i", dr, result.f)
    assert np.allclose(result.virial, expected, rtol=1e-12, atol=1e-12)
    assert not np.allclose(result.virial, centre_based)


def test_forcefield_point_ions_need_no_rotations():
    """Charges at the centre of mass: LJ plus Coulomb, no torques, no orientation input."""
    # Arrange
    ion = Species(id=0, name="ion", mass=1.0,
                  lj_sites=(LJSite((0, 0, 0), 1.0, 1.0),), charges=(Charge((0, 0, 0), 1.0),))
    forcefield = ForceField((ion,), 6.0)
    dr = np.array([[2.0, 0.0, 0.0], [0.3, -1.1, 1.4]])
    zeros = np.zeros(2, dtype=np.int64)

    # Act
    result = forcefield.evaluate(dr, zeros, zeros)

    # Assert
    r = np.linalg.norm(dr, axis=1)
    assert not forcefield.needs_orientation
    assert np.allclose(result.u, lj_pair(1.0, 1.0, dr).u + 1.0 / r, rtol=1e-12)
    assert np.allclose(result.virial, lj_pair(1.0, 1.0, dr).virial + 1.0 / r, rtol=1e-12)
    assert np.all(result.tau_i == 0.0) and np.all(result.tau_j == 0.0)

def test_forcefield_groups_species_pairs():
    """Mixed batches give the same numbers as one-species evaluations."""
    # Arrange
    table = (Species.single_site(0, sigma=1.0, epsilon=1.0), Species.single_site(1, sigma=1.5, epsilon=0.5))
    forcefield = ForceField(table, 4.0, eta={(0, 1): 0.8})
    dr = np.array([[1.3, 0.0, 0.0], [0.0, 1.6, 0.0], [0.0, 0.0, 1.8]])
    si = np.array([0, 1, 0])
    sj = np.array([1, 1, 0])

    # Act
    result = forcefield.evaluate(dr, si, sj)

    # Assert
    sigma, eps = mix(1.0, 1.5, 1.0, 0.5, 0.8)
    assert float(result.u[0]) == pytest.approx(float(lj_pair(sigma, eps, dr[0]).u))
    assert float(result.u[1]) == pytest.approx(float(lj_pair(1.5, 0.5, dr[1]).u))
    assert float(result.u[2]) == pytest.approx(float(lj_pair(1.0, 1.0, dr[2]).u))


def test_forcefield_self_energy_counts_dipoles(polar_species):
    """Self term per dipole times molecule count, only with the reaction field on."""
    table = (polar_species,)
    on = ForceField(table, 2.0, reaction_field=True, eps_rf=math.inf)
    off = ForceField(table, 2.0)
    assert on.self_energy([10]) == pytest.approx(10 * -0.5 * 1.2 ** 2 / 8.0)
    assert off.self_energy([10]) == 0.0
