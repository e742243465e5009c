"""
Internal unit system.

All kernels work in a consistent set of atomic units in which the Boltzmann
constant and the Coulomb constant are both exactly 1, so neither appears in
any formula of the engine. Conversion to and from SI-facing values happens
only while parsing configuration and while formatting output.

Base units:

- length: the Bohr radius, 5.29177e-11 m
- charge: the elementary charge
- mass: 1 kg/mol (1000 u)

Every other unit follows from these three and k_B = k_C = 1:

    E0 = k_C q0^2 / l0          T0 = E0 / k_B          rho0 = 1 / l0^3
    p0 = rho0 E0                t0 = l0 sqrt(m0 / E0)  v0 = l0 / t0
    a0 = l0 / t0^2              D0 = l0 q0             Q0 = l0^2 q0

Energies, pressures and times use the per-particle mass m0 / N_A; densities
are reported per mole (mol/l). Charges are reported in elementary charges;
the molar charge (C/mol) is kept for reference only and no per-particle SI
charge output is provided.
"""

import math
from dataclasses import dataclass
from typing import Dict, Tuple

from app.exceptions import UnknownDimensionError

# CODATA 2018 exact / recommended values used to derive the unit factors.
AVOGADRO = 6.02214076e23          # 1/mol
BOLTZMANN_SI = 1.380649e-23       # J/K
COULOMB_SI = 8.9875517923e9       # N m^2 / C^2
ELEMENTARY_CHARGE_SI = 1.602176634e-19  # C
DEBYE_SI = 3.33564095198152e-30   # C m
ANGSTROM_SI = 1.0e-10             # m

DIMENSIONS: Tuple[str, ...] = (
    "length",
    "mass",
    "charge",
    "energy",
    "temperature",
    "pressure",
    "time",
    "velocity",
    "acceleration",
    "density",
    "dipole",
    "quadrupole",
)

# SI-facing unit of every dimension tag, used in help texts and CSV headers.
SI_UNITS: Dict[str, str] = {
    "length": "m",
    "mass": "kg/mol",
    "charge": "e",
    "energy": "J",
    "temperature": "K",
    "pressure": "Pa",
    "time": "s",
    "velocity": "m/s",
    "acceleration": "m/s^2",
    "density": "mol/l",
    "dipole": "D",
    "quadrupole": "D*Angstrom",
}


@dataclass(frozen=True)
class UnitSystem:
    """
    A consistent unit system with k_B = k_C = 1.

    **Fields:**
    - `length_unit_m (float)`: meters per internal length unit.
    - `charge_unit (float)`: elementary charges per internal charge unit.
    - `mass_unit_kg_per_mol (float)`: kg/mol per internal mass unit.
    - `reduced (bool)`: when True every factor is 1 (pure reduced LJ units,
      sigma = epsilon = m = 1) and conversions are the identity.

    Instances are immutable and can be shared freely between threads.
    """

    length_unit_m: float = 5.29177e-11
    charge_unit: float = 1.0
    mass_unit_kg_per_mol: float = 1.0
    reduced: bool = False

    @classmethod
    def atomic(cls) -> "UnitSystem":
        """The Bohr / elementary charge / kg-per-mol system used by the scenario generators."""
        return cls()

    @classmethod
    def reduced_lj(cls) -> "UnitSystem":
        """Identity system for reduced Lennard-Jones runs."""
        return cls(length_unit_m=1.0, charge_unit=1.0, mass_unit_kg_per_mol=1.0, reduced=True)

    # -------------------------------------------------------------------
    # Base and derived scale factors (SI-facing value of one internal unit)
    # -------------------------------------------------------------------

    @property
    def charge_unit_c(self) -> float:
        return self.charge_unit * ELEMENTARY_CHARGE_SI

    @property
    def charge_unit_c_per_mol(self) -> float:
        return self.charge_unit_c * AVOGADRO

    @property
    def particle_mass_kg(self) -> float:
        return self.mass_unit_kg_per_mol / AVOGADRO

    @property
    def energy(self) -> float:
        return COULOMB_SI * self.charge_unit_c ** 2 / self.length_unit_m

    @property
    def temperature(self) -> float:
        return self.energy / BOLTZMANN_SI

    @property
    def number_density(self) -> float:
        # particles per m^3
        return 1.0 / self.length_unit_m ** 3

    @property
    def density(self) -> float:
        # mol/l
        return self.number_density / AVOGADRO / 1000.0

    @property
    def pressure(self) -> float:
        return self.number_density * self.energy

    @property
    def time(self) -> float:
        return self.length_unit_m * math.sqrt(self.particle_mass_kg / self.energy)

    @property
    def velocity(self) -> float:
        return self.length_unit_m / self.time

    @property
    def acceleration(self) -> float:
        return self.length_unit_m / self.time ** 2

    @property
    def dipole(self) -> float:
        # debye
        return self.length_unit_m * self.charge_unit_c / DEBYE_SI

    @property
    def quadrupole(self) -> float:
        # debye * angstrom
        return self.length_unit_m ** 2 * self.charge_unit_c / (DEBYE_SI * ANGSTROM_SI)

    def factor(self, dimension: str) -> float:
        """
        Returns the SI-facing value of one internal unit of `dimension`.

        **Raises:**
        - `UnknownDimensionError`: if `dimension` is not one of `DIMENSIONS`.
        """
        if dimension not in DIMENSIONS:
            raise UnknownDimensionError(
                f"Unknown dimension '{dimension}'. Available dimensions: {', '.join(DIMENSIONS)}"
            )
        if self.reduced:
            return 1.0
        if dimension == "length":
            return self.length_unit_m
        if dimension == "mass":
            return self.mass_unit_kg_per_mol
        if dimension == "charge":
            return self.charge_unit
        return getattr(self, dimension)


def to_internal(quantity: float, dimension: str, sys: UnitSystem) -> float:
    """
    Converts an SI-facing quantity to internal units.

    **Example:**
    >>> round(to_internal(315775.0, "temperature", UnitSystem.atomic()), 5)
    1.0
    """
    return quantity / sys.factor(dimension)


def from_internal(quantity: float, dimension: str, sys: UnitSystem) -> float:
    """Converts an internal quantity back to its SI-facing value; inverse of `to_internal`."""
    return quantity * sys.factor(dimension)
