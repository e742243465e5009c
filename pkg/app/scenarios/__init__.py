"""
Scenario generators: homogeneous liquid, droplet, planar interface and a plain
lattice filler, plus density profiles for checking them.

Reduced Lennard-Jones scenarios use sigma = epsilon = m = 1. The ethylene-oxide
species is defined in the atomic unit system of `app.units` (Bohr, elementary
charge, kg/mol); its state point is converted with `to_internal`.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from app.cells import minimum_image
from app.exceptions import ConfigurationError, InfeasibleDensityError
from app.model import (
    IDENTITY_QUATERNION,
    Dipole,
    LJSite,
    MoleculeBlock,
    SimConfig,
    Species,
    Vector,
    instantaneous_temperature,
    species_arrays,
)
from app.units import UnitSystem, to_internal

logger = logging.getLogger(__name__)

KINDS = ("homogeneous", "droplet", "planar_interface", "lattice")
LATTICES = {
    "sc": np.array([[0.5, 0.5, 0.5]]),
    "fcc": np.array([[0.25, 0.25, 0.25], [0.75, 0.75, 0.25], [0.75, 0.25, 0.75], [0.25, 0.75, 0.75]]),
}
MIN_SEPARATION = 0.7  # in units of the largest sigma
GAP = 1.0  # vapour keeps this many sigma away from the liquid surface


# -----------------------------------------------------------------------------------
# Built-in species
# -----------------------------------------------------------------------------------

def lj_species(id: int = 0) -> Species:
    return Species.single_site(id=id, name="lj")


def ethylene_oxide_species(id: int = 0, units: Optional[UnitSystem] = None) -> Species:
    """
    Stand-in rigid ethylene oxide: two CH2 sites and one O site in a triangle plus a
    point dipole along the symmetry axis. Geometry and parameters are rounded
    literature-like values in atomic units, not a fitted model.
    """
    units = units or UnitSystem.atomic()

    def length(angstrom: float) -> float:
        return to_internal(angstrom * 1e-10, "length", units)

    def energy(kelvin: float) -> float:
        return to_internal(kelvin, "temperature", units)

    def mass(g_per_mol: float) -> float:
        return to_internal(g_per_mol * 1e-3, "mass", units)

    positions = [(length(-0.7341), 0.0, 0.0), (length(0.7341), 0.0, 0.0), (0.0, 0.0, length(1.2270))]
    masses = [mass(14.027), mass(14.027), mass(15.999)]
    sites = (
        LJSite(positions[0], length(3.5266), energy(84.739)),
        LJSite(positions[1], length(3.5266), energy(84.739)),
        LJSite(positions[2], length(3.0929), energy(62.126)),
    )
    com_z = masses[2] * positions[2][2] / sum(masses)
    dipole = Dipole((0.0, 0.0, com_z), (0.0, 0.0, 1.0), to_internal(2.459, "dipole", units))
    return Species.from_point_masses(id, "ethylene_oxide", masses, positions, lj_sites=sites, dipoles=(dipole,))


BUILTIN_SPECIES = {"lj": lj_species, "ethylene_oxide": ethylene_oxide_species}


def builtin_species(name: str, id: int = 0) -> Species:
    try:
        return BUILTIN_SPECIES[name](id)
    except KeyError:
        raise ConfigurationError(
            f"Unknown species '{name}'. Available species: {', '.join(BUILTIN_SPECIES)}"
        ) from None


def ethylene_oxide_state_point(units: Optional[UnitSystem] = None) -> Dict[str, float]:
    """Liquid state point of the homogeneous benchmark: 16.9 mol/l at 375 K, internal units."""
    units = units or UnitSystem.atomic()
    return {
        "density": to_internal(16.9, "density", units),
        "temperature": to_internal(375.0, "temperature", units),
        "rc": to_internal(10.58e-10, "length", units),
        "dt": to_internal(2.0e-15, "time", units),
    }


# -----------------------------------------------------------------------------------
# Scenario description
# -----------------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    """
    Everything needed to generate an initial configuration, in internal units.

    **Fields:**
    - `kind`: homogeneous, droplet, planar_interface or lattice.
    - `n`: target molecule count (homogeneous and lattice).
    - `density`: number density (homogeneous and lattice).
    - `box`: box edges; required for droplet and planar_interface, derived from n and
      density otherwise.
    - `temperature`: target kinetic temperature.
    - `species`: species table; molecules are all of species `species_id`.
    - `lattice`: "sc" or "fcc".
    - `radius`, `offset`: droplet radius and centre offset as a fraction of the box.
    - `liquid_density`, `vapor_density`: initialisation densities of the two phases.
    - `slab_thickness`: liquid slab thickness of the planar interface.
    - `seed`: fully determines the output.
    """

    kind: str = "homogeneous"
    n: Optional[int] = None
    density: Optional[float] = None
    box: Optional[Vector] = None
    temperature: float = 0.95
    species: Tuple[Species, ...] = field(default_factory=lambda: (lj_species(),))
    species_id: int = 0
    lattice: str = "sc"
    radius: Optional[float] = None
    offset: float = 0.05
    liquid_density: float = 0.62
    vapor_density: float = 0.01
    slab_thickness: Optional[float] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigurationError(f"Unknown scenario kind '{self.kind}'. Available kinds: {', '.join(KINDS)}")
        if self.lattice not in LATTICES:
            raise ConfigurationError(f"Unknown lattice '{self.lattice}'. Available lattices: sc, fcc")
        if self.temperature < 0.0:
            raise ConfigurationError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 <= self.species_id < len(self.species):
            raise ConfigurationError(f"species id {self.species_id} not in a table of {len(self.species)}")
        if self.kind in ("homogeneous", "lattice"):
            if self.density is None or not self.density > 0.0:
                raise ConfigurationError(f"{self.kind} scenario needs a positive density")
            if self.box is None and (self.n is None or self.n < 1):
                raise ConfigurationError(f"{self.kind} scenario needs n >= 1 or a box")
        else:
            if self.box is None:
                raise ConfigurationError(f"{self.kind} scenario needs a box")
            if self.liquid_density <= 0.0 or self.vapor_density < 0.0:
                raise ConfigurationError("liquid density must be > 0 and vapour density >= 0")

    @property
    def sigma(self) -> float:
        sites = self.species[self.species_id].lj_sites
        return max((s.sigma for s in sites), default=1.0)

    def resolved_box(self) -> np.ndarray:
        if self.box is not None:
            return np.asarray(self.box, dtype=float)
        edge = (self.n / self.density) ** (1.0 / 3.0)
        return np.full(3, edge)


# -----------------------------------------------------------------------------------
# Lattices
# -----------------------------------------------------------------------------------

def lattice_sites(box: np.ndarray, cells: np.ndarray, kind: str = "sc") -> np.ndarray:
    """All sites of `cells` unit cells per axis filling `box`, in C order."""
    basis = LATTICES[kind]
    spacing = box / cells
    index = np.indices(tuple(int(c) for c in cells)).reshape(3, -1).T
    sites = (index[:, None, :] + basis[None, :, :]).reshape(-1, 3)
    return sites * spacing


def nearest_neighbour(box: np.ndarray, cells: np.ndarray, kind: str) -> float:
    spacing = float(np.min(box / cells))
    return spacing if kind == "sc" else spacing / math.sqrt(2.0)


def _cells_for_density(box: np.ndarray, density: float, kind: str) -> np.ndarray:
    per_cell = LATTICES[kind].shape[0]
    edge = (per_cell / density) ** (1.0 / 3.0)
    return np.maximum(1, np.round(box / edge)).astype(np.int64)


def _check_spacing(distance: float, sigma: float, what: str) -> None:
    if distance <= MIN_SEPARATION * sigma:
        raise InfeasibleDensityError(
            f"{what}: nearest-neighbour distance {distance:.4g} is below {MIN_SEPARATION} sigma;"
            " lower the density"
        )


def fill_lattice(n: int, box: np.ndarray, kind: str, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """`n` sites of the smallest cubic lattice holding at least `n` sites in `box`."""
    per_cell = LATTICES[kind].shape[0]
    cells = np.full(3, int(math.ceil((n / per_cell) ** (1.0 / 3.0) - 1e-9)), dtype=np.int64)
    _check_spacing(nearest_neighbour(box, cells, kind), sigma, "lattice")
    sites = lattice_sites(box, cells, kind)
    if sites.shape[0] > n:
        keep = np.sort(rng.choice(sites.shape[0], size=n, replace=False))
        sites = sites[keep]
    return sites


def _phase_sites(box: np.ndarray, density: float, kind: str, sigma: float, what: str) -> np.ndarray:
    if density == 0.0:
        return np.zeros((0, 3))
    cells = _cells_for_density(box, density, kind)
    _check_spacing(nearest_neighbour(box, cells, kind), sigma, what)
    return lattice_sites(box, cells, kind)


# -----------------------------------------------------------------------------------
# Velocities and orientations
# -----------------------------------------------------------------------------------

def maxwell_boltzmann(block: MoleculeBlock, species, temperature: float, rng: np.random.Generator) -> None:
    """
    Draws velocities and body-frame angular momenta at `temperature`, removes the net
    momentum and rescales so the kinetic temperature equals `temperature` exactly.
    """
    n = len(block)
    if n == 0:
        return
    masses, inv_inertia, rot_dof = species_arrays(species)
    m = masses[block.species]
    block.v = rng.normal(size=(n, 3)) * np.sqrt(temperature / m)[:, None]
    block.v -= (m[:, None] * block.v).sum(axis=0) / m.sum()
    inertia = np.divide(1.0, inv_inertia, out=np.zeros_like(inv_inertia), where=inv_inertia > 0.0)
    block.j = rng.normal(size=(n, 3)) * np.sqrt(temperature * inertia[block.species])
    rotating = rot_dof[block.species] > 0
    if np.any(rotating):
        # scipy stores quaternions scalar-last
        q = Rotation.random(int(rotating.sum()), random_state=rng).as_quat()
        block.q[rotating] = np.roll(q, 1, axis=1)
    current = instantaneous_temperature(block, species)
    if current > 0.0:
        factor = math.sqrt(temperature / current)
        block.v *= factor
        block.j *= factor
    elif temperature > 0.0:
        logger.warning("cannot reach T = %g with %d molecule(s) at zero net momentum", temperature, n)


# -----------------------------------------------------------------------------------
# Generators
# -----------------------------------------------------------------------------------

def _block(positions: np.ndarray, species_id: int) -> MoleculeBlock:
    n = positions.shape[0]
    return MoleculeBlock(
        ids=np.arange(n, dtype=np.int64),
        species=np.full(n, species_id, dtype=np.int64),
        r=positions.copy(),
        v=np.zeros((n, 3)),
        q=np.tile(IDENTITY_QUATERNION, (n, 1)),
        j=np.zeros((n, 3)),
    )


def droplet_centre(box: np.ndarray, offset: float) -> np.ndarray:
    return box / 2.0 + offset * box


def _droplet_positions(spec: ScenarioSpec, box: np.ndarray) -> np.ndarray:
    radius = spec.radius if spec.radius is not None else float(np.min(box)) / 4.0
    if radius <= 0.0 or 2.0 * radius >= float(np.min(box)):
        raise ConfigurationError(f"droplet radius {radius} does not fit into box {tuple(box)}")
    centre = droplet_centre(box, spec.offset)
    liquid = _phase_sites(box, spec.liquid_density, spec.lattice, spec.sigma, "liquid")
    vapor = _phase_sites(box, spec.vapor_density, spec.lattice, spec.sigma, "vapour")
    d_liquid = np.linalg.norm(minimum_image(liquid - centre, box), axis=1)
    d_vapor = np.linalg.norm(minimum_image(vapor - centre, box), axis=1)
    return np.concatenate([liquid[d_liquid < radius], vapor[d_vapor > radius + GAP * spec.sigma]])


def _interface_positions(spec: ScenarioSpec, box: np.ndarray) -> np.ndarray:
    thickness = spec.slab_thickness if spec.slab_thickness is not None else box[2] / 2.0
    if not 0.0 < thickness < box[2]:
        raise ConfigurationError(f"slab thickness {thickness} must lie in (0, {box[2]})")
    liquid = _phase_sites(box, spec.liquid_density, spec.lattice, spec.sigma, "liquid")
    vapor = _phase_sites(box, spec.vapor_density, spec.lattice, spec.sigma, "vapour")
    mid = box[2] / 2.0
    in_slab = np.abs(liquid[:, 2] - mid) < thickness / 2.0
    outside = np.abs(vapor[:, 2] - mid) > thickness / 2.0 + GAP * spec.sigma
    return np.concatenate([liquid[in_slab], vapor[outside]])


RUN_DEFAULTS = {
    "homogeneous": {"long_range": "lj_tail"},
    "lattice": {},
    "droplet": {"lj_shifted": True},
    "planar_interface": {"lj_shifted": True},
}


def generate(spec: ScenarioSpec, rc: float = 2.5, dt: float = 0.002, **run) -> Tuple[SimConfig, MoleculeBlock]:
    """
    Builds the initial molecules of a scenario and a matching run configuration.

    **Parameters:**
    - `spec`: the scenario.
    - `rc`, `dt`: cutoff and time step in internal units.
    - `run`: further `SimConfig` fields; they override the per-kind defaults
      (LJ tail for homogeneous, truncated-shifted LJ for droplet and interface).

    **Returns:**
    - `(SimConfig, MoleculeBlock)`; `block.to_states()` gives the molecule list.

    **Raises:**
    - `InfeasibleDensityError`: if a lattice would put molecules closer than 0.7 sigma.
    - `ConfigurationError`: for inconsistent geometry.

    **Example:**
    >>> config, block = generate(ScenarioSpec(kind="lattice", n=1000, density=0.6223))
    >>> len(block)
    1000
    """
    rng = np.random.default_rng(spec.seed)
    box = spec.resolved_box()
    if spec.kind == "droplet":
        positions = _droplet_positions(spec, box)
    elif spec.kind == "planar_interface":
        positions = _interface_positions(spec, box)
    elif spec.box is not None:
        positions = _phase_sites(box, spec.density, spec.lattice, spec.sigma, spec.kind)
    else:
        positions = fill_lattice(spec.n, box, spec.lattice, spec.sigma, rng)
    block = _block(positions, spec.species_id)
    maxwell_boltzmann(block, spec.species, spec.temperature, rng)
    options = {**RUN_DEFAULTS[spec.kind], **run}
    config = SimConfig(box=tuple(float(b) for b in box), rc=rc, dt=dt, species=tuple(spec.species), **options)
    logger.info("generated %s scenario: %d molecules in box %s", spec.kind, len(block),
                tuple(round(float(b), 4) for b in box))
    return config, block


# -----------------------------------------------------------------------------------
# Profiles
# -----------------------------------------------------------------------------------

@dataclass
class DensityProfile:
    edges: np.ndarray
    counts: np.ndarray
    density: np.ndarray

    @property
    def centres(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def measure_profile(states, box, axis: int, bins: int) -> DensityProfile:
    """
    Number density in `bins` slabs perpendicular to `axis`.

    **Raises:**
    - `ConfigurationError`: if bins < 2 or the axis is not 0, 1 or 2.
    """
    if bins < 2:
        raise ConfigurationError(f"need at least 2 bins, got {bins}")
    if axis not in (0, 1, 2):
        raise ConfigurationError(f"axis must be 0, 1 or 2, got {axis}")
    box = np.asarray(box, dtype=float)
    r = states.r if isinstance(states, MoleculeBlock) else np.array([s.r for s in states]).reshape(-1, 3)
    coordinate = np.mod(r[:, axis], box[axis])
    counts, edges = np.histogram(coordinate, bins=bins, range=(0.0, box[axis]))
    slab_volume = box[axis] / bins * float(np.prod(np.delete(box, axis)))
    return DensityProfile(edges=edges, counts=counts, density=counts / slab_volume)
