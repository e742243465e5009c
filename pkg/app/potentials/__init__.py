"""
Site-site interaction kernels, mixing rules and long-range corrections.

Every kernel broadcasts over arrays of separation vectors shaped (..., 3), so the
same function evaluates one pair or a whole batch. Separation vectors always
point from site b to site a (`r_vec = r_a - r_b`) and the returned force acts on
site a; site b receives the opposite force.

Point polarities (charges, axial dipoles, axial linear quadrupoles) share one
chain rule: each kernel class returns the energy v(r, c_a, c_b, c_ab) and its
four partial derivatives, where c_a = e_a . s, c_b = e_b . s, c_ab = e_a . e_b
and s = r_vec / r. Forces and torques on both sites then follow from

    f_a   = -dv/dr s - dv/dc_a (e_a - c_a s)/r - dv/dc_b (e_b - c_b s)/r
    tau_a = -e_a x (dv/dc_a s + dv/dc_ab e_b)
    tau_b = -e_b x (dv/dc_b s + dv/dc_ab e_a)

Charges have no axis; their axis vector is zero and every angular term drops out.
Quadrupole strengths follow the linear-quadrupole convention Q = sum q z^2, so
three charges (q, -2q, q) spaced by d along the axis carry Q = 2 q d^2; a dipole
made of +q and -q spaced by d carries mu = q d.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import ConfigurationError, SingularOverlapError
from app.model import Species, SpeciesTable

logger = logging.getLogger(__name__)

OVERLAP_FRACTION = 1e-6  # separations below this fraction of sigma are clamped


# -----------------------------------------------------------------------------------
# Results
# -----------------------------------------------------------------------------------

@dataclass
class PairResult:
    """
    Energy, force on site a and virial r . f of one pair (or a batch of pairs).

    Site b receives `-f`; only one force is stored.
    """

    u: np.ndarray
    f: np.ndarray
    virial: np.ndarray


def _distance(r_vec: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    r_vec = np.asarray(r_vec, dtype=float)
    r2 = np.einsum("...i,...i->...", r_vec, r_vec)
    if np.any(r2 == 0.0):
        raise SingularOverlapError("two interaction sites coincide (r = 0)")
    return r_vec, np.sqrt(r2)


# -----------------------------------------------------------------------------------
# Lennard-Jones
# -----------------------------------------------------------------------------------

def lj_energy(sigma, epsilon, r):
    sr6 = (sigma / r) ** 6
    return 4.0 * epsilon * (sr6 * sr6 - sr6)


def lj_pair(sigma, epsilon, r_vec) -> PairResult:
    """
    Lennard-Jones 12-6 pair: u = 4 eps [(sigma/r)^12 - (sigma/r)^6].

    **Raises:**
    - `SingularOverlapError`: if any separation is exactly zero.

    Separations below 1e-6 sigma are clamped to that distance for the force
    magnitude and reported as a warning instead of producing infinities.

    **Example:**
    >>> float(lj_pair(1.0, 1.0, [1.0, 0.0, 0.0]).u)
    0.0
    """
    r_vec, r = _distance(r_vec)
    sigma = np.asarray(sigma, dtype=float)
    r_min = OVERLAP_FRACTION * sigma
    if np.any(r < r_min):
        logger.warning("near overlap: %d site pair(s) closer than %.3g sigma, clamping force",
                       int(np.count_nonzero(r < r_min)), OVERLAP_FRACTION)
        r_eff = np.maximum(r, r_min)
    else:
        r_eff = r
    sr6 = (sigma / r_eff) ** 6
    u = 4.0 * epsilon * (sr6 * sr6 - sr6)
    # -du/dr / r, so that f = w * r_vec points away from b for repulsion
    w = 24.0 * epsilon * (2.0 * sr6 * sr6 - sr6) / (r_eff * r)
    f = w[..., None] * r_vec
    return PairResult(u=u, f=f, virial=w * r * r)


def ljts_pair(sigma, epsilon, r_vec, rc: float) -> PairResult:
    """
    Truncated and shifted Lennard-Jones: u_LJ(r) - u_LJ(rc) inside rc, zero outside.

    Forces inside the cutoff are the plain LJ forces; at and beyond rc both energy
    and force vanish.
    """
    if not rc > 0.0:
        raise ConfigurationError(f"cutoff must be positive, got {rc}")
    result = lj_pair(sigma, epsilon, r_vec)
    r_vec = np.asarray(r_vec, dtype=float)
    r = np.sqrt(np.einsum("...i,...i->...", r_vec, r_vec))
    inside = r < rc
    shift = lj_energy(sigma, epsilon, rc)
    return PairResult(
        u=np.where(inside, result.u - shift, 0.0),
        f=np.where(inside[..., None], result.f, 0.0),
        virial=np.where(inside, result.virial, 0.0),
    )


# -----------------------------------------------------------------------------------
# Mixing
# -----------------------------------------------------------------------------------

def mix(sigma_i: float, sigma_j: float, eps_i: float, eps_j: float, eta: float = 1.0) -> Tuple[float, float]:
    """
    Lorentz-Berthelot combination with a binary interaction parameter.

    **Returns:**
    - `(sigma_ij, epsilon_ij)` with sigma_ij = (sigma_i + sigma_j) / 2 and
      epsilon_ij = eta * sqrt(eps_i * eps_j).

    **Example:**
    >>> mix(1.0, 3.0, 4.0, 9.0)
    (2.0, 6.0)
    """
    if not (sigma_i > 0.0 and sigma_j > 0.0):
        raise ConfigurationError(f"sigma must be positive, got {sigma_i}, {sigma_j}")
    if eps_i < 0.0 or eps_j < 0.0:
        raise ConfigurationError(f"epsilon must be non-negative, got {eps_i}, {eps_j}")
    if not eta > 0.0:
        raise ConfigurationError(f"binary interaction parameter must be positive, got {eta}")
    return (sigma_i + sigma_j) / 2.0, eta * math.sqrt(eps_i * eps_j)


class MixingTable:
    """
    Mixed LJ parameters for every (species, site) x (species, site) combination.

    `eta` maps unordered species-id pairs to binary interaction parameters; missing
    pairs default to 1. Like-species pairs always use eta = 1.
    """

    def __init__(self, species: SpeciesTable, eta: Optional[Mapping[Tuple[int, int], float]] = None) -> None:
        self._table: Dict[Tuple[int, int, int, int], Tuple[float, float]] = {}
        self._eta: Dict[Tuple[int, int], float] = {}
        for (a, b), value in (eta or {}).items():
            self._eta[(min(a, b), max(a, b))] = float(value)
        for si in species:
            for sj in species:
                pair_eta = 1.0 if si.id == sj.id else self.eta(si.id, sj.id)
                for a, site_a in enumerate(si.lj_sites):
                    for b, site_b in enumerate(sj.lj_sites):
                        self._table[(si.id, a, sj.id, b)] = mix(
                            site_a.sigma, site_b.sigma, site_a.epsilon, site_b.epsilon, pair_eta
                        )

    def eta(self, species_i: int, species_j: int) -> float:
        return self._eta.get((min(species_i, species_j), max(species_i, species_j)), 1.0)

    def get(self, species_i: int, site_a: int, species_j: int, site_b: int) -> Tuple[float, float]:
        return self._table[(species_i, site_a, species_j, site_b)]


# -----------------------------------------------------------------------------------
# Point polarities
# -----------------------------------------------------------------------------------

class PolarityKernel(ABC):
    """
    Energy of two point polarities and its partial derivatives.

    Subclasses implement `derivatives(r, ca, cb, cab)` returning
    `(v, dv/dr, dv/dca, dv/dcb, dv/dcab)` for unit strengths scaled by
    `self.strength_a * self.strength_b`.
    """

    def __init__(self, strength_a, strength_b) -> None:
        self.strength_a = strength_a
        self.strength_b = strength_b

    @property
    def prefactor(self):
        return self.strength_a * self.strength_b

    @abstractmethod
    def derivatives(self, r, ca, cb, cab):
        pass  # pragma: no cover

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(strength_a={self.strength_a}, strength_b={self.strength_b})"


class KernelFactory:
    """
    Registry of polarity kernels keyed by the ordered pair of site kinds.

    Kernels are registered for one ordering only; asking for the reverse ordering
    returns the registered kernel wrapped so that the roles of a and b swap.
    """

    _kernels: Dict[Tuple[str, str], type] = {}

    @classmethod
    def register_kernel(cls, kind_a: str, kind_b: str):
        def decorator(subclass):
            key = (kind_a.lower(), kind_b.lower())
            if key in cls._kernels:
                raise ValueError(f"Kernel for '{kind_a}-{kind_b}' is already registered.")
            cls._kernels[key] = subclass
            return subclass
        return decorator

    @classmethod
    def create_kernel(cls, kind_a: str, kind_b: str, strength_a, strength_b) -> PolarityKernel:
        key = (kind_a.lower(), kind_b.lower())
        if key in cls._kernels:
            return cls._kernels[key](strength_a, strength_b)
        if key[::-1] in cls._kernels:
            return SwappedKernel(cls._kernels[key[::-1]](strength_b, strength_a))
        available = ", ".join(f"{a}-{b}" for a, b in cls._kernels)
        raise ValueError(f"Unsupported polarity pair: '{kind_a}-{kind_b}'. Available pairs: {available}")


class SwappedKernel(PolarityKernel):
    """Kernel for (b, a) evaluated with the roles of the sites exchanged."""

    def __init__(self, inner: PolarityKernel) -> None:
        super().__init__(inner.strength_b, inner.strength_a)
        self.inner = inner

    def derivatives(self, r, ca, cb, cab):
        # seen from the other site the unit vector flips: ca' = -cb, cb' = -ca
        v, dvdr, dvdca_, dvdcb_, dvdcab = self.inner.derivatives(r, -cb, -ca, cab)
        return v, dvdr, -dvdcb_, -dvdca_, dvdcab


@KernelFactory.register_kernel("charge", "charge")
class ChargeChargeKernel(PolarityKernel):
    def derivatives(self, r, ca, cb, cab):
        v = self.prefactor / r
        zero = np.zeros_like(v)
        return v, -v / r, zero, zero, zero


@KernelFactory.register_kernel("charge", "dipole")
class ChargeDipoleKernel(PolarityKernel):
    """v = q mu c_b / r^2 (charge on site a)."""

    def derivatives(self, r, ca, cb, cab):
        k = self.prefactor / r ** 2
        v = k * cb
        zero = np.zeros_like(v)
        return v, -2.0 * v / r, zero, k * np.ones_like(v), zero


@KernelFactory.register_kernel("charge", "quadrupole")
class ChargeQuadrupoleKernel(PolarityKernel):
    """v = q Q (3 c_b^2 - 1) / (2 r^3)."""

    def derivatives(self, r, ca, cb, cab):
        k = self.prefactor / r ** 3
        v = 0.5 * k * (3.0 * cb ** 2 - 1.0)
        zero = np.zeros_like(v)
        return v, -3.0 * v / r, zero, 3.0 * k * cb, zero


@KernelFactory.register_kernel("dipole", "dipole")
class DipoleDipoleKernel(PolarityKernel):
    """v = mu_a mu_b (c_ab - 3 c_a c_b) / r^3."""

    def derivatives(self, r, ca, cb, cab):
        k = self.prefactor / r ** 3
        v = k * (cab - 3.0 * ca * cb)
        return v, -3.0 * v / r, -3.0 * k * cb, -3.0 * k * ca, k * np.ones_like(v)


@KernelFactory.register_kernel("dipole", "quadrupole")
class DipoleQuadrupoleKernel(PolarityKernel):
    """v = 3/2 mu Q (c_a (1 - 5 c_b^2) + 2 c_b c_ab) / r^4."""

    def derivatives(self, r, ca, cb, cab):
        k = 1.5 * self.prefactor / r ** 4
        v = k * (ca * (1.0 - 5.0 * cb ** 2) + 2.0 * cb * cab)
        return (
            v,
            -4.0 * v / r,
            k * (1.0 - 5.0 * cb ** 2),
            2.0 * k * (cab - 5.0 * ca * cb),
            2.0 * k * cb,
        )


@KernelFactory.register_kernel("quadrupole", "quadrupole")
class QuadrupoleQuadrupoleKernel(PolarityKernel):
    """v = 3/4 Q_a Q_b (1 - 5 c_a^2 - 5 c_b^2 + 2 c_ab^2 + 35 c_a^2 c_b^2 - 20 c_a c_b c_ab) / r^5."""

    def derivatives(self, r, ca, cb, cab):
        k = 0.75 * self.prefactor / r ** 5
        v = k * (1.0 - 5.0 * ca ** 2 - 5.0 * cb ** 2 + 2.0 * cab ** 2
                 + 35.0 * (ca * cb) ** 2 - 20.0 * ca * cb * cab)
        return (
            v,
            -5.0 * v / r,
            10.0 * k * (ca * (7.0 * cb ** 2 - 1.0) - 2.0 * cb * cab),
            10.0 * k * (cb * (7.0 * ca ** 2 - 1.0) - 2.0 * ca * cab),
            4.0 * k * (cab - 5.0 * ca * cb),
        )


@dataclass
class PolaritySite:
    """A polarity in the world frame; `axis` is ignored for charges."""

    kind: str
    position: np.ndarray
    strength: float
    axis: Optional[np.ndarray] = None


def _axis_array(site_axis, shape) -> np.ndarray:
    if site_axis is None:
        return np.zeros(shape)
    return np.broadcast_to(np.asarray(site_axis, dtype=float), shape)


def chain_rule(r_vec, e_a, e_b, kernel: PolarityKernel):
    """
    Applies a polarity kernel to separations `r_vec` and world axes `e_a`, `e_b`.

    **Returns:**
    - `(PairResult, tau_a, tau_b)`
    """
    r_vec, r = _distance(r_vec)
    s = r_vec / r[..., None]
    ca = np.einsum("...i,...i->...", e_a, s)
    cb = np.einsum("...i,...i->...", e_b, s)
    cab = np.einsum("...i,...i->...", e_a, e_b)
    v, dvdr, dvdca, dvdcb, dvdcab = kernel.derivatives(r, ca, cb, cab)
    # the angle cosines depend on r too, hence the transverse terms
    f = (-dvdr[..., None] * s
         - dvdca[..., None] * (e_a - ca[..., None] * s) / r[..., None]
         - dvdcb[..., None] * (e_b - cb[..., None] * s) / r[..., None])
    # torque = -e x dV/de
    g_a = dvdca[..., None] * s + dvdcab[..., None] * e_b
    g_b = dvdcb[..., None] * s + dvdcab[..., None] * e_a
    tau_a = -np.cross(e_a, g_a)
    tau_b = -np.cross(e_b, g_b)
    virial = np.einsum("...i,...i->...", r_vec, f)
    return PairResult(u=np.asarray(v, dtype=float), f=f, virial=virial), tau_a, tau_b


def electrostatic_pair(site_a: PolaritySite, site_b: PolaritySite, r_vec=None):
    """
    Energy, force on site a and torques on both sites for two point polarities.

    **Parameters:**
    - `site_a`, `site_b`: polarities ('charge', 'dipole' or 'quadrupole') with world
      positions and axes.
    - `r_vec`: separation r_a - r_b; computed from the positions when omitted.

    **Returns:**
    - `(PairResult, tau_a, tau_b)`

    **Example:**
    >>> a = PolaritySite("charge", np.zeros(3), 1.0)
    >>> b = PolaritySite("charge", np.array([2.0, 0, 0]), -1.0)
    >>> float(electrostatic_pair(a, b)[0].u)
    -0.5
    """
    if r_vec is None:
        r_vec = np.asarray(site_a.position, dtype=float) - np.asarray(site_b.position, dtype=float)
    r_vec = np.asarray(r_vec, dtype=float)
    kernel = KernelFactory.create_kernel(site_a.kind, site_b.kind, site_a.strength, site_b.strength)
    e_a = _axis_array(site_a.axis if site_a.kind != "charge" else None, r_vec.shape)
    e_b = _axis_array(site_b.axis if site_b.kind != "charge" else None, r_vec.shape)
    return chain_rule(r_vec, e_a, e_b, kernel)


# -----------------------------------------------------------------------------------
# Reaction field
# -----------------------------------------------------------------------------------

def reaction_field_factor(rc: float, eps_rf: float) -> float:
    """
    k_RF = 2 (eps_RF - 1) / (2 eps_RF + 1) / rc^3; eps_RF = inf gives the conducting limit 1 / rc^3.

    **Raises:**
    - `ConfigurationError`: if eps_rf < 1.
    """
    if eps_rf < 1.0:
        raise ConfigurationError(f"reaction-field permittivity must be >= 1, got {eps_rf}")
    prefactor = 1.0 if math.isinf(eps_rf) else 2.0 * (eps_rf - 1.0) / (2.0 * eps_rf + 1.0)
    return prefactor / rc ** 3


class ReactionFieldKernel(PolarityKernel):
    """u = -k_RF mu_a mu_b c_ab; independent of the separation."""

    def __init__(self, strength_a, strength_b, k_rf: float) -> None:
        super().__init__(strength_a, strength_b)
        self.k_rf = k_rf

    def derivatives(self, r, ca, cb, cab):
        v = -self.k_rf * self.prefactor * cab
        zero = np.zeros_like(v)
        return v, zero, zero, zero, -self.k_rf * self.prefactor * np.ones_like(v)


def reaction_field_correction(mu_a, e_a, mu_b, e_b, r_vec, rc: float, eps_rf: float):
    """
    Reaction-field term for dipole pairs inside the cutoff.

    Adds u = -k_RF (mu_a . mu_b) for r < rc and nothing beyond. The term carries no
    force, only torques. Its self part lives in `reaction_field_self_energy`.

    **Returns:**
    - `(PairResult, tau_a, tau_b)`
    """
    k_rf = reaction_field_factor(rc, eps_rf)
    r_vec = np.asarray(r_vec, dtype=float)
    e_a = np.broadcast_to(np.asarray(e_a, dtype=float), r_vec.shape)
    e_b = np.broadcast_to(np.asarray(e_b, dtype=float), r_vec.shape)
    result, tau_a, tau_b = chain_rule(r_vec, e_a, e_b, ReactionFieldKernel(mu_a, mu_b, k_rf))
    r = np.sqrt(np.einsum("...i,...i->...", r_vec, r_vec))
    inside = r < rc
    result.u = np.where(inside, result.u, 0.0)
    tau_a = np.where(inside[..., None], tau_a, 0.0)
    tau_b = np.where(inside[..., None], tau_b, 0.0)
    return result, tau_a, tau_b


def reaction_field_self_energy(mu, rc: float, eps_rf: float) -> float:
    """
    Self term of the reaction field: every dipole interacts with the field it
    polarises itself, -k_RF mu^2 / 2 per dipole. This is the only place the
    engine adds it; `ForceField` includes it in the long-range energy.
    """
    mu = np.asarray(mu, dtype=float)
    return float(-0.5 * reaction_field_factor(rc, eps_rf) * np.sum(mu ** 2))


# -----------------------------------------------------------------------------------
# Long-range LJ tail
# -----------------------------------------------------------------------------------

def lj_tail_terms(density: float, sigma: float, epsilon: float, rc: float) -> Tuple[float, float]:
    """Per-molecule energy and pressure tail for one site pair at number density `density`."""
    sr3 = (sigma / rc) ** 3
    sr9 = sr3 ** 3
    energy = (8.0 / 3.0) * math.pi * density * epsilon * sigma ** 3 * (sr9 / 3.0 - sr3)
    pressure = (16.0 / 3.0) * math.pi * density ** 2 * epsilon * sigma ** 3 * (2.0 * sr9 / 3.0 - sr3)
    return energy, pressure


def lj_tail_correction(density: float, sigma: float, epsilon: float, rc: float, N: int) -> Tuple[float, float]:
    """
    Isotropic mean-field correction for LJ interactions beyond the cutoff.

    Assumes a homogeneous fluid at number density `density`.

    **Returns:**
    - `(energy, pressure)`: the total energy correction for N molecules and the
      pressure correction.
    """
    energy, pressure = lj_tail_terms(density, sigma, epsilon, rc)
    return N * energy, pressure


def tail_correction_for_system(counts: Sequence[int], volume: float, mixing: MixingTable,
                               species: SpeciesTable, rc: float) -> Tuple[float, float]:
    """Composition-weighted LJ tail over every site pair of a mixture."""
    total = int(sum(counts))
    if total == 0:
        return 0.0, 0.0
    density = total / volume
    energy_per = 0.0
    pressure = 0.0
    for si in species:
        for sj in species:
            x_ij = (counts[si.id] / total) * (counts[sj.id] / total)
            if x_ij == 0.0:
                continue
            for a in range(len(si.lj_sites)):
                for b in range(len(sj.lj_sites)):
                    sigma, eps = mixing.get(si.id, a, sj.id, b)
                    e, p = lj_tail_terms(density, sigma, eps, rc)
                    energy_per += x_ij * e
                    pressure += x_ij * p
    return total * energy_per, pressure


# -----------------------------------------------------------------------------------
# Molecule-pair evaluation
# -----------------------------------------------------------------------------------

@dataclass
class BatchResult:
    """
    Per molecule-pair totals: force on molecule i (j gets `-f`), torques about both
    centres of mass, energy and site-site virial (sum over site pairs of r_ab . f_ab).
    """

    f: np.ndarray
    tau_i: np.ndarray
    tau_j: np.ndarray
    u: np.ndarray
    virial: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "BatchResult":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n), np.zeros(n))


_POLAR_KINDS = (("charges", "charge", "q"), ("dipoles", "dipole", "mu"), ("quadrupoles", "quadrupole", "Q"))


class ForceField:
    """
    All site-site interactions between rigid molecules.

    **Parameters:**
    - `species`: the species table.
    - `rc (float)`: cutoff radius (molecule centres).
    - `lj_shifted (bool)`: use the truncated-shifted LJ form.
    - `eta`: binary interaction parameters per unordered species pair.
    - `reaction_field (bool)`, `eps_rf (float)`: dipolar reaction field.
    """

    def __init__(self, species: SpeciesTable, rc: float, lj_shifted: bool = False,
                 eta: Optional[Mapping[Tuple[int, int], float]] = None,
                 reaction_field: bool = False, eps_rf: float = float("inf")) -> None:
        self.species = tuple(species)
        self.rc = rc
        self.lj_shifted = lj_shifted
        self.mixing = MixingTable(self.species, eta)
        self.reaction_field = reaction_field
        self.eps_rf = eps_rf
        self.k_rf = reaction_field_factor(rc, eps_rf) if reaction_field else 0.0
        self.needs_orientation = any(not sp.is_rotationally_symmetric for sp in self.species)
        self._polar = [self._polar_sites(sp) for sp in self.species]
        self._kernels: Dict[Tuple[int, int, int, int], PolarityKernel] = {}

    @staticmethod
    def _polar_sites(sp: Species):
        sites = []
        for attr, kind, strength in _POLAR_KINDS:
            for site in getattr(sp, attr):
                axis = np.zeros(3) if kind == "charge" else np.asarray(site.body_axis, dtype=float)
                sites.append((kind, np.asarray(site.body_pos, dtype=float), axis, getattr(site, strength)))
        return sites

    def _kernel(self, si: int, a: int, sj: int, b: int) -> PolarityKernel:
        key = (si, a, sj, b)
        if key not in self._kernels:
            kind_a, _, _, strength_a = self._polar[si][a]
            kind_b, _, _, strength_b = self._polar[sj][b]
            self._kernels[key] = KernelFactory.create_kernel(kind_a, kind_b, strength_a, strength_b)
        return self._kernels[key]

    def evaluate(self, dr: np.ndarray, species_i: np.ndarray, species_j: np.ndarray,
                 rot_i: Optional[np.ndarray] = None, rot_j: Optional[np.ndarray] = None) -> BatchResult:
        """
        Evaluates molecule pairs with centre separations `dr = r_i - r_j` (image shifts
        already applied). `rot_i`, `rot_j` are body-to-world rotation matrices (n, 3, 3);
        they may be omitted when every species is rotationally symmetric.
        """
        n = dr.shape[0]
        out = BatchResult.zeros(n)
        if n == 0:
            return out
        if len(self.species) == 1:
            self._evaluate_group(0, 0, dr, rot_i, rot_j, out)
            return out
        for si in range(len(self.species)):
            for sj in range(len(self.species)):
                index = np.nonzero((species_i == si) & (species_j == sj))[0]
                if index.size:
                    sub = BatchResult.zeros(index.size)
                    self._evaluate_group(si, sj, dr[index],
                                         None if rot_i is None else rot_i[index],
                                         None if rot_j is None else rot_j[index], sub)
                    out.f[index] = sub.f
                    out.tau_i[index] = sub.tau_i
                    out.tau_j[index] = sub.tau_j
                    out.u[index] = sub.u
                    out.virial[index] = sub.virial
        return out

    def _world(self, rot: Optional[np.ndarray], body: np.ndarray, n: int) -> np.ndarray:
        if rot is None or not np.any(body):
            return np.broadcast_to(body, (n, 3)) if rot is None else np.zeros((n, 3))
        return np.einsum("nij,j->ni", rot, body)

    def _evaluate_group(self, si: int, sj: int, dr, rot_i, rot_j, out: BatchResult) -> None:
        sp_i, sp_j = self.species[si], self.species[sj]
        n = dr.shape[0]
        for a, site_a in enumerate(sp_i.lj_sites):
            da = self._world(rot_i, np.asarray(site_a.body_pos, dtype=float), n)
            for b, site_b in enumerate(sp_j.lj_sites):
                db = self._world(rot_j, np.asarray(site_b.body_pos, dtype=float), n)
                sigma, eps = self.mixing.get(si, a, sj, b)
                if eps == 0.0:
                    continue
                r_ab = dr + da - db
                res = ljts_pair(sigma, eps, r_ab, self.rc) if self.lj_shifted else lj_pair(sigma, eps, r_ab)
                self._accumulate(out, res, r_ab, da, db, None, None)
        polar_i, polar_j = self._polar[si], self._polar[sj]
        for a, (kind_a, pos_a, axis_a, mu_a) in enumerate(polar_i):
            da = self._world(rot_i, pos_a, n)
            e_a = self._world(rot_i, axis_a, n) if kind_a != "charge" else np.zeros((n, 3))
            for b, (kind_b, pos_b, axis_b, mu_b) in enumerate(polar_j):
                db = self._world(rot_j, pos_b, n)
                e_b = self._world(rot_j, axis_b, n) if kind_b != "charge" else np.zeros((n, 3))
                r_ab = dr + da - db
                res, tau_a, tau_b = chain_rule(r_ab, e_a, e_b, self._kernel(si, a, sj, b))
                self._accumulate(out, res, r_ab, da, db, tau_a, tau_b)
                if self.reaction_field and kind_a == "dipole" and kind_b == "dipole":
                    rf, tau_a, tau_b = chain_rule(r_ab, e_a, e_b, ReactionFieldKernel(mu_a, mu_b, self.k_rf))
                    self._accumulate(out, rf, r_ab, da, db, tau_a, tau_b)

    @staticmethod
    def _accumulate(out: BatchResult, res: PairResult, r_ab, da, db, tau_a, tau_b) -> None:
        # site-site virial r_ab . f_ab
        out.f += res.f
        out.u += res.u
        out.virial += np.einsum("ij,ij->i", r_ab, res.f)
        out.tau_i += np.cross(da, res.f)
        out.tau_j -= np.cross(db, res.f)
        if tau_a is not None:
            out.tau_i += tau_a
            out.tau_j += tau_b

    def self_energy(self, counts: Sequence[int]) -> float:
        """Reaction-field self term for `counts[s]` molecules of each species."""
        if not self.reaction_field:
            return 0.0
        total = 0.0
        for sp in self.species:
            mus = [d.mu for d in sp.dipoles]
            if mus and counts[sp.id]:
                total += counts[sp.id] * reaction_field_self_energy(mus, self.rc, self.eps_rf)
        return total
