"""
Rigid molecular species and per-molecule dynamic state.

A `Species` is an immutable rigid model: Lennard-Jones sites, point charges,
axial point dipoles and axial linear quadrupoles at fixed body-frame positions
relative to the centre of mass, together with the total mass and the three
principal moments of inertia (body frame).

Dynamic state is kept in two shapes:

- `MoleculeState` is one molecule as a plain record. It is what the public
  API accepts and returns.
- `MoleculeBlock` is the structure-of-arrays form (positions as an (N, 3)
  array and so on) that every kernel and integrator actually works on.

Velocities and angular momenta are stored at half steps (t - dt/2).
Angular momentum is stored in the body frame.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import ConfigurationError, UndefinedTemperatureError

logger = logging.getLogger(__name__)

HALO = -1  # owned_by marker for read-only halo copies
AXIS_TOLERANCE = 1e-12
INERTIA_EPS = 1e-12

Vector = Tuple[float, float, float]


# -----------------------------------------------------------------------------------
# Species
# -----------------------------------------------------------------------------------

@dataclass(frozen=True)
class LJSite:
    body_pos: Vector
    sigma: float
    epsilon: float


@dataclass(frozen=True)
class Charge:
    body_pos: Vector
    q: float


@dataclass(frozen=True)
class Dipole:
    body_pos: Vector
    body_axis: Vector
    mu: float


@dataclass(frozen=True)
class Quadrupole:
    body_pos: Vector
    body_axis: Vector
    Q: float


def _vec(values: Iterable[float]) -> Vector:
    x, y, z = (float(v) for v in values)
    return (x, y, z)


@dataclass(frozen=True)
class Species:
    """
    A rigid molecular model.

    **Fields:**
    - `id (int)`: index of the species in the species table.
    - `name (str)`: human readable label.
    - `lj_sites`, `charges`, `dipoles`, `quadrupoles`: interaction sites.
    - `mass (float)`: total mass, > 0.
    - `inertia_diag (tuple)`: principal moments of inertia in the body frame, each >= 0.

    **Raises:**
    - `ConfigurationError`: for non-positive mass, negative inertia, non-unit axes,
      or a species that can rotate but has no rotational inertia at all.
    """

    id: int
    name: str
    mass: float
    inertia_diag: Vector = (0.0, 0.0, 0.0)
    lj_sites: Tuple[LJSite, ...] = ()
    charges: Tuple[Charge, ...] = ()
    dipoles: Tuple[Dipole, ...] = ()
    quadrupoles: Tuple[Quadrupole, ...] = ()

    def __post_init__(self) -> None:
        if not self.mass > 0.0:
            raise ConfigurationError(f"Species '{self.name}': mass must be positive, got {self.mass}")
        if any(i < 0.0 for i in self.inertia_diag):
            raise ConfigurationError(f"Species '{self.name}': negative moment of inertia {self.inertia_diag}")
        for site in (*self.dipoles, *self.quadrupoles):
            norm = float(np.linalg.norm(site.body_axis))
            if abs(norm - 1.0) > AXIS_TOLERANCE:
                raise ConfigurationError(f"Species '{self.name}': site axis {site.body_axis} is not a unit vector")
        if not self.is_rotationally_symmetric and max(self.inertia_diag) <= INERTIA_EPS:
            raise ConfigurationError(
                f"Species '{self.name}': orientation-dependent sites need non-zero moments of inertia"
            )

    @classmethod
    def single_site(cls, id: int = 0, sigma: float = 1.0, epsilon: float = 1.0, mass: float = 1.0,
                    name: str = "lj") -> "Species":
        """A one-centre Lennard-Jones species (rotationally symmetric)."""
        return cls(id=id, name=name, mass=mass, lj_sites=(LJSite((0.0, 0.0, 0.0), sigma, epsilon),))

    @classmethod
    def from_point_masses(cls, id: int, name: str, masses: Sequence[float], positions: Sequence[Sequence[float]],
                          **sites) -> "Species":
        """
        Builds a species whose mass and inertia come from point masses.

        The point masses are only used for the inertia tensor; `positions` must already
        be expressed in the body frame (principal axes aligned with x, y, z). Site
        positions passed in `sites` are shifted by the same centre-of-mass offset.
        """
        m = np.asarray(masses, dtype=float)
        pos = np.asarray(positions, dtype=float)
        total, com, inertia = inertia_from_point_masses(m, pos)
        shifted = {}
        for key, group in sites.items():
            shifted[key] = tuple(_shift_site(s, com) for s in group)
        return cls(id=id, name=name, mass=total, inertia_diag=_vec(inertia), **shifted)

    # -- derived views --------------------------------------------------------

    @property
    def has_polarities(self) -> bool:
        return bool(self.charges or self.dipoles or self.quadrupoles)

    @property
    def is_rotationally_symmetric(self) -> bool:
        """True when orientation cannot matter: LJ sites and charges only, all at the centre of mass."""
        if self.dipoles or self.quadrupoles:
            return False
        return all(np.allclose(site.body_pos, 0.0) for site in (*self.lj_sites, *self.charges))

    @property
    def is_linear(self) -> bool:
        """True for rotors with exactly one vanishing principal moment."""
        if self.is_rotationally_symmetric:
            return False
        return sum(1 for i in self.inertia_diag if i <= INERTIA_EPS) == 1

    @property
    def rotational_dof(self) -> int:
        if self.is_rotationally_symmetric:
            return 0
        return 2 if self.is_linear else 3

    @property
    def inverse_inertia(self) -> np.ndarray:
        """1/I per body axis, 0 for symmetric species and for a degenerate axis."""
        inv = np.zeros(3)
        if self.is_rotationally_symmetric:
            return inv
        for k, moment in enumerate(self.inertia_diag):
            if moment > INERTIA_EPS:
                inv[k] = 1.0 / moment
        return inv


def _shift_site(site, com: np.ndarray):
    pos = _vec(np.asarray(site.body_pos, dtype=float) - com)
    if isinstance(site, LJSite):
        return LJSite(pos, site.sigma, site.epsilon)
    if isinstance(site, Charge):
        return Charge(pos, site.q)
    if isinstance(site, Dipole):
        return Dipole(pos, site.body_axis, site.mu)
    return Quadrupole(pos, site.body_axis, site.Q)


def inertia_from_point_masses(masses: np.ndarray, positions: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Returns total mass, centre of mass and the diagonal of the inertia tensor about it."""
    total = float(masses.sum())
    com = (masses[:, None] * positions).sum(axis=0) / total
    rel = positions - com
    r2 = (rel ** 2).sum(axis=1)
    diag = np.array([(masses * (r2 - rel[:, k] ** 2)).sum() for k in range(3)])
    return total, com, diag


SpeciesTable = Sequence[Species]


def validate_species_table(species: SpeciesTable) -> None:
    for index, sp in enumerate(species):
        if sp.id != index:
            raise ConfigurationError(f"Species table entry {index} carries id {sp.id}")


# -----------------------------------------------------------------------------------
# Quaternions
# -----------------------------------------------------------------------------------

def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of quaternion arrays shaped (..., 4) as (w, x, y, z)."""
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        (
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ),
        axis=-1,
    )


def rotation_matrices(q: np.ndarray) -> np.ndarray:
    """Body-to-world rotation matrices for unit quaternions shaped (..., 4)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        (
            np.stack((1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)), axis=-1),
            np.stack((2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)), axis=-1),
            np.stack((2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)), axis=-1),
        ),
        axis=-2,
    )


IDENTITY_QUATERNION = np.array([1.0, 0.0, 0.0, 0.0])


# -----------------------------------------------------------------------------------
# Per-molecule state
# -----------------------------------------------------------------------------------

@dataclass
class MoleculeState:
    """
    Dynamic state of one molecule.

    `v` and `j` live at t - dt/2; `j` is expressed in the body frame.
    `owned_by` is a worker id, or `HALO` for a read-only copy.
    """

    id: int
    species: int
    r: np.ndarray
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUATERNION.copy())
    j: np.ndarray = field(default_factory=lambda: np.zeros(3))
    owned_by: int = 0

    def __post_init__(self) -> None:
        self.r = np.asarray(self.r, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.j = np.asarray(self.j, dtype=float)


@dataclass
class MoleculeBlock:
    """
    Structure-of-arrays storage for a set of molecules.

    Arrays: `ids` (N,), `species` (N,), `r` (N, 3), `v` (N, 3), `q` (N, 4), `j` (N, 3).
    """

    ids: np.ndarray
    species: np.ndarray
    r: np.ndarray
    v: np.ndarray
    q: np.ndarray
    j: np.ndarray

    @classmethod
    def empty(cls) -> "MoleculeBlock":
        return cls(
            ids=np.zeros(0, dtype=np.int64),
            species=np.zeros(0, dtype=np.int64),
            r=np.zeros((0, 3)),
            v=np.zeros((0, 3)),
            q=np.zeros((0, 4)),
            j=np.zeros((0, 3)),
        )

    @classmethod
    def from_states(cls, states: Sequence[MoleculeState]) -> "MoleculeBlock":
        if not states:
            return cls.empty()
        return cls(
            ids=np.array([s.id for s in states], dtype=np.int64),
            species=np.array([s.species for s in states], dtype=np.int64),
            r=np.array([s.r for s in states], dtype=float).reshape(-1, 3),
            v=np.array([s.v for s in states], dtype=float).reshape(-1, 3),
            q=np.array([s.q for s in states], dtype=float).reshape(-1, 4),
            j=np.array([s.j for s in states], dtype=float).reshape(-1, 3),
        )

    def to_states(self, owned_by: int = 0) -> List[MoleculeState]:
        return [
            MoleculeState(
                id=int(self.ids[k]),
                species=int(self.species[k]),
                r=self.r[k].copy(),
                v=self.v[k].copy(),
                q=self.q[k].copy(),
                j=self.j[k].copy(),
                owned_by=owned_by,
            )
            for k in range(len(self))
        ]

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def take(self, index) -> "MoleculeBlock":
        """Returns a copy holding the selected rows (index array or boolean mask)."""
        return MoleculeBlock(
            ids=self.ids[index].copy(),
            species=self.species[index].copy(),
            r=self.r[index].copy(),
            v=self.v[index].copy(),
            q=self.q[index].copy(),
            j=self.j[index].copy(),
        )

    def copy(self) -> "MoleculeBlock":
        return self.take(slice(None))

    def sort_by_id(self) -> "MoleculeBlock":
        return self.take(np.argsort(self.ids, kind="stable"))

    @staticmethod
    def concatenate(blocks: Sequence["MoleculeBlock"]) -> "MoleculeBlock":
        blocks = [b for b in blocks if len(b)]
        if not blocks:
            return MoleculeBlock.empty()
        return MoleculeBlock(
            ids=np.concatenate([b.ids for b in blocks]),
            species=np.concatenate([b.species for b in blocks]),
            r=np.concatenate([b.r for b in blocks]),
            v=np.concatenate([b.v for b in blocks]),
            q=np.concatenate([b.q for b in blocks]),
            j=np.concatenate([b.j for b in blocks]),
        )


States = Union[MoleculeBlock, Sequence[MoleculeState]]


def as_block(states: States) -> MoleculeBlock:
    if isinstance(states, MoleculeBlock):
        return states
    return MoleculeBlock.from_states(list(states))


# -----------------------------------------------------------------------------------
# Run configuration
# -----------------------------------------------------------------------------------

ENSEMBLES = ("NVE", "NVT")
LONG_RANGE_MODES = ("none", "lj_tail", "lj_tail+reaction_field")


@dataclass(frozen=True)
class SimConfig:
    """
    Everything a run needs besides the initial molecules, in internal units.

    **Raises:**
    - `ConfigurationError`: if any box edge is not larger than 2*rc, rc <= 0, dt <= 0,
      workers < 1, or an enumerated option is unknown.
    """

    box: Vector
    rc: float
    dt: float
    species: Tuple[Species, ...]
    n_steps: int = 0
    ensemble: str = "NVE"
    target_T: Optional[float] = None
    thermostat_interval: int = 1
    rebalance_interval: int = 100
    adaptive_cells: bool = False
    subdivision_threshold: int = 8
    workers: int = 1
    seed: int = 0
    long_range: str = "none"
    eps_rf: float = float("inf")
    lj_shifted: bool = False
    axis_policy: str = "alternate"
    decomposition: str = "kdtree"
    trajectory_interval: int = 0

    def __post_init__(self) -> None:
        if not self.rc > 0.0:
            raise ConfigurationError(f"cutoff must be positive, got {self.rc}")
        if any(not edge > 2.0 * self.rc for edge in self.box):
            raise ConfigurationError(f"every box edge must exceed 2*cutoff = {2.0 * self.rc}, got {self.box}")
        if not self.dt > 0.0:
            raise ConfigurationError(f"time step must be positive, got {self.dt}")
        if self.workers < 1:
            raise ConfigurationError(f"need at least one worker, got {self.workers}")
        if self.n_steps < 0:
            raise ConfigurationError(f"number of steps must be >= 0, got {self.n_steps}")
        if self.ensemble not in ENSEMBLES:
            raise ConfigurationError(f"unknown ensemble '{self.ensemble}'")
        if self.ensemble == "NVT" and (self.target_T is None or not self.target_T > 0.0):
            raise ConfigurationError("NVT needs a positive target temperature")
        if self.long_range not in LONG_RANGE_MODES:
            raise ConfigurationError(f"unknown long-range mode '{self.long_range}'")
        if self.thermostat_interval < 1 or self.rebalance_interval < 1:
            raise ConfigurationError("thermostat and rebalance intervals must be >= 1")
        if self.axis_policy not in ("alternate", "longest"):
            raise ConfigurationError(f"unknown axis policy '{self.axis_policy}'")
        if self.decomposition not in ("kdtree", "uniform"):
            raise ConfigurationError(f"unknown decomposition '{self.decomposition}'")
        validate_species_table(self.species)

    @property
    def box_array(self) -> np.ndarray:
        return np.asarray(self.box, dtype=float)

    @property
    def volume(self) -> float:
        return float(np.prod(self.box))


# -----------------------------------------------------------------------------------
# Kinetic energy and temperature
# -----------------------------------------------------------------------------------

def species_arrays(species: SpeciesTable) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-species masses (S,), inverse inertia (S, 3) and rotational dof (S,)."""
    masses = np.array([sp.mass for sp in species], dtype=float)
    inv_inertia = np.array([sp.inverse_inertia for sp in species], dtype=float).reshape(-1, 3)
    rot_dof = np.array([sp.rotational_dof for sp in species], dtype=np.int64)
    return masses, inv_inertia, rot_dof


def kinetic_energy_parts(states: States, species: SpeciesTable) -> Tuple[float, float]:
    """Translational and rotational kinetic energy."""
    block = as_block(states)
    if len(block) == 0:
        return 0.0, 0.0
    masses, inv_inertia, _ = species_arrays(species)
    m = masses[block.species]
    trans = 0.5 * float(np.sum(m * np.einsum("ij,ij->i", block.v, block.v)))
    rot = 0.5 * float(np.sum(block.j ** 2 * inv_inertia[block.species]))
    return trans, rot


def kinetic_energy(states: States, species: SpeciesTable) -> float:
    """
    Total kinetic energy: sum of m v^2 / 2 plus sum of j^2 / (2 I) over rotating axes.

    **Example:**
    >>> sp = [Species.single_site()]
    >>> kinetic_energy([MoleculeState(0, 0, r=[0, 0, 0], v=[2.0, 0, 0])], sp)
    2.0
    """
    trans, rot = kinetic_energy_parts(states, species)
    return trans + rot


def degrees_of_freedom(states: States, species: SpeciesTable) -> int:
    block = as_block(states)
    _, _, rot_dof = species_arrays(species)
    return int(3 * len(block) + rot_dof[block.species].sum()) if len(block) else 0


def instantaneous_temperature(states: States, species: SpeciesTable) -> float:
    """
    Equipartition temperature 2 E_kin / N_dof with k_B = 1.

    **Raises:**
    - `UndefinedTemperatureError`: for an empty system.
    """
    block = as_block(states)
    if len(block) == 0:
        raise UndefinedTemperatureError("temperature of an empty system is undefined")
    return 2.0 * kinetic_energy(block, species) / degrees_of_freedom(block, species)


# -----------------------------------------------------------------------------------
# Species files and checkpoints
# -----------------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def format_species(species: SpeciesTable) -> List[str]:
    """Species table in the species-file format."""
    lines: List[str] = []
    for sp in species:
        inertia = " ".join(_fmt(i) for i in sp.inertia_diag)
        lines.append(f"species {sp.name} mass {_fmt(sp.mass)} inertia {inertia}")
        for s in sp.lj_sites:
            lines.append("lj " + " ".join(_fmt(x) for x in (*s.body_pos, s.sigma, s.epsilon)))
        for s in sp.charges:
            lines.append("charge " + " ".join(_fmt(x) for x in (*s.body_pos, s.q)))
        for s in sp.dipoles:
            lines.append("dipole " + " ".join(_fmt(x) for x in (*s.body_pos, *s.body_axis, s.mu)))
        for s in sp.quadrupoles:
            lines.append("quadrupole " + " ".join(_fmt(x) for x in (*s.body_pos, *s.body_axis, s.Q)))
        lines.append("end")
    return lines


def _unit_axis(values: Sequence[float]) -> Vector:
    axis = np.asarray(values, dtype=float)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise ValueError("zero-length site axis")
    return _vec(axis / norm)


def parse_species_lines(lines: Iterable[Tuple[int, str]]) -> Tuple[Species, ...]:
    """
    Parses (line number, text) pairs in the species-file format.

    **Raises:**
    - `ConfigurationError`: naming the line of the first malformed record.
    """
    table: List[Species] = []
    current: Optional[dict] = None
    for lineno, raw in lines:
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        words = text.split()
        keyword, args = words[0].lower(), words[1:]
        try:
            if keyword == "species":
                if current is not None:
                    raise ValueError("previous species block is missing 'end'")
                current = {"name": args[0], "mass": float(args[args.index("mass") + 1]),
                           "lj_sites": [], "charges": [], "dipoles": [], "quadrupoles": []}
                if "inertia" in args:
                    at = args.index("inertia")
                    current["inertia_diag"] = _vec(args[at + 1:at + 4])
            elif current is None:
                raise ValueError(f"'{keyword}' outside a species block")
            elif keyword == "lj":
                x, y, z, sigma, eps = (float(a) for a in args)
                current["lj_sites"].append(LJSite((x, y, z), sigma, eps))
            elif keyword == "charge":
                x, y, z, q = (float(a) for a in args)
                current["charges"].append(Charge((x, y, z), q))
            elif keyword == "dipole":
                x, y, z, ex, ey, ez, mu = (float(a) for a in args)
                current["dipoles"].append(Dipole((x, y, z), _unit_axis((ex, ey, ez)), mu))
            elif keyword == "quadrupole":
                x, y, z, ex, ey, ez, big_q = (float(a) for a in args)
                current["quadrupoles"].append(Quadrupole((x, y, z), _unit_axis((ex, ey, ez)), big_q))
            elif keyword == "end":
                table.append(Species(
                    id=len(table),
                    name=current["name"],
                    mass=current["mass"],
                    inertia_diag=current.get("inertia_diag", (0.0, 0.0, 0.0)),
                    lj_sites=tuple(current["lj_sites"]),
                    charges=tuple(current["charges"]),
                    dipoles=tuple(current["dipoles"]),
                    quadrupoles=tuple(current["quadrupoles"]),
                ))
                current = None
            else:
                raise ValueError(f"unknown record '{keyword}'")
        except (ValueError, KeyError, IndexError) as exc:
            if isinstance(exc, ConfigurationError):
                raise ConfigurationError(f"line {lineno}: {exc}") from exc
            raise ConfigurationError(f"line {lineno}: malformed species record: {exc}") from exc
    if current is not None:
        raise ConfigurationError(f"species '{current['name']}' is missing 'end'")
    return tuple(table)


def load_species_file(path: Union[str, Path]) -> Tuple[Species, ...]:
    text = Path(path).read_text(encoding="utf-8")
    return parse_species_lines(enumerate(text.splitlines(), start=1))


CHECKPOINT_COLUMNS = "id species rx ry rz vx vy vz qw qx qy qz jx jy jz"


def format_checkpoint(box: Sequence[float], step: int, species: SpeciesTable, block: MoleculeBlock) -> str:
    """
    Checkpoint text: header (box, step, species table) then one line per molecule
    `id species rx ry rz vx vy vz qw qx qy qz jx jy jz` (j in the body frame).
    """
    lines = [
        "# checkpoint (internal units)",
        "box " + " ".join(_fmt(b) for b in box),
        f"step {step}",
        f"species {len(species)}",
        *format_species(species),
        f"molecules {len(block)}",
        f"# {CHECKPOINT_COLUMNS}",
    ]
    for k in range(len(block)):
        values = (*block.r[k], *block.v[k], *block.q[k], *block.j[k])
        lines.append(f"{int(block.ids[k])} {int(block.species[k])} " + " ".join(_fmt(x) for x in values))
    return "\n".join(lines) + "\n"


def write_checkpoint(path: Union[str, Path], box: Sequence[float], step: int, species: SpeciesTable,
                     block: MoleculeBlock) -> None:
    Path(path).write_text(format_checkpoint(box, step, species, block), encoding="utf-8")


def read_checkpoint(path: Union[str, Path]) -> Tuple[Vector, int, Tuple[Species, ...], MoleculeBlock]:
    """Reads one checkpoint frame written by `write_checkpoint`."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    box: Optional[Vector] = None
    step = 0
    cursor = 0
    species_lines: List[Tuple[int, str]] = []
    while cursor < len(lines):
        words = lines[cursor].split()
        cursor += 1
        if not words or words[0].startswith("#"):
            continue
        if words[0] == "box":
            box = _vec(words[1:4])
        elif words[0] == "step":
            step = int(words[1])
        elif words[0] == "species" and len(words) == 2:
            continue
        elif words[0] == "molecules":
            break
        else:
            species_lines.append((cursor, lines[cursor - 1]))
    if box is None:
        raise ConfigurationError(f"{path}: checkpoint has no box line")
    species = parse_species_lines(species_lines)
    rows = [line.split() for line in lines[cursor:] if line.strip() and not line.startswith("#")]
    if not rows:
        return box, step, species, MoleculeBlock.empty()
    data = np.array([[float(x) for x in row[2:]] for row in rows], dtype=float)
    block = MoleculeBlock(
        ids=np.array([int(row[0]) for row in rows], dtype=np.int64),
        species=np.array([int(row[1]) for row in rows], dtype=np.int64),
        r=data[:, 0:3].copy(),
        v=data[:, 3:6].copy(),
        q=data[:, 6:10].copy(),
        j=data[:, 10:13].copy(),
    )
    return box, step, species, block
