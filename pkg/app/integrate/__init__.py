"""
Leapfrog integration of rigid molecules and the velocity-rescaling thermostat.

Velocities and angular momenta live at half steps. One step of the engine is

1. forces and torques at r(t), q(t)
2. kick:   v(t+dt/2) = v(t-dt/2) + dt f / m,   j(t+dt/2) = j(t-dt/2) + dt tau
3. thermostat (NVT only, every `thermostat_interval` steps)
4. drift:  r(t+dt) = r(t) + dt v(t+dt/2),     q(t+dt) = q(t) + dt qdot(t+dt/2)

Reported kinetic energies use full-step velocities v(t) = v(t-dt/2) + dt f(t) / 2m
computed on the fly; the stored state keeps the half-step values.

The angular momentum is stored in the body frame of the current orientation.
The quaternion derivative qdot = q (x) (0, omega_body) / 2 is evaluated at a
predicted half-step orientation, and q is renormalised after every step.

The serial engine and the parallel workers share `kick`, `drift`,
`compute_pair_forces` and `StepTotals`, which keeps a one-worker parallel run
bit-identical to a serial run.
"""

import logging
import math
from dataclasses import astuple, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.cells import CellGrid, PairBatch, PairTraversalStats, for_each_pair, wrap_and_halo
from app.exceptions import CannotRescaleError, ConfigurationError, InstabilityError
from app.model import (
    INERTIA_EPS,
    MoleculeBlock,
    SimConfig,
    SpeciesTable,
    States,
    as_block,
    degrees_of_freedom,
    instantaneous_temperature,
    kinetic_energy_parts,
    quat_multiply,
    rotation_matrices,
    species_arrays,
)
from app.potentials import ForceField, tail_correction_for_system

logger = logging.getLogger(__name__)


@dataclass
class StepForces:
    """
    Per-molecule force and world-frame torque about the centre of mass, plus the
    pair energy and virial of the same force pass.
    """

    forces: np.ndarray
    torques: np.ndarray
    potential: float = 0.0
    virial: float = 0.0
    stats: PairTraversalStats = field(default_factory=PairTraversalStats)

    @classmethod
    def zeros(cls, n: int) -> "StepForces":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)))


# -----------------------------------------------------------------------------------
# Single-operation integrators
# -----------------------------------------------------------------------------------

def _per_row(values, like: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values[..., None] if values.ndim and like.ndim > 1 else values


def leapfrog_translate(state, f, m, dt: float):
    """
    Translational leapfrog step on a `MoleculeState` or `MoleculeBlock` (in place).

    v(t+dt/2) = v(t-dt/2) + dt f / m, then r(t+dt) = r(t) + dt v(t+dt/2).

    **Raises:**
    - `ConfigurationError`: if dt <= 0.
    - `InstabilityError`: if any force component is not finite.

    **Example:**
    >>> from app.model import MoleculeState
    >>> s = leapfrog_translate(MoleculeState(0, 0, r=[0.0, 0, 0], v=[1.0, 0, 0]), [2.0, 0, 0], 1.0, 0.1)
    >>> [round(float(x), 12) for x in (s.v[0], s.r[0])]
    [1.2, 0.12]
    """
    if not dt > 0.0:
        raise ConfigurationError(f"time step must be positive, got {dt}")
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise InstabilityError("non-finite force encountered; reduce the time step")
    state.v = state.v + dt * f / _per_row(m, f)
    state.r = state.r + dt * state.v
    return state


def _rotate(q: np.ndarray, j: np.ndarray, tau: np.ndarray, inv_inertia: np.ndarray,
            dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised rotational kick and drift for (n, 4) quaternions and (n, 3) body-frame j."""
    j_world = np.einsum("nij,nj->ni", rotation_matrices(q), j) + dt * tau
    return _drift_rotation(q, j_world, inv_inertia, dt)


def _drift_rotation(q: np.ndarray, j_world: np.ndarray, inv_inertia: np.ndarray,
                    dt: float) -> Tuple[np.ndarray, np.ndarray]:
    def omega_body(orientation):
        # R^T j: world angular momentum seen from the body axes
        j_body = np.einsum("nji,nj->ni", rotation_matrices(orientation), j_world)
        return inv_inertia * j_body

    def qdot(orientation, omega):
        pure = np.concatenate([np.zeros(omega.shape[:-1] + (1,)), omega], axis=-1)
        return 0.5 * quat_multiply(orientation, pure)

    # predictor: orientation at t + dt/2, then the full step with its angular velocity
    q_half = q + 0.5 * dt * qdot(q, omega_body(q))
    q_half /= np.linalg.norm(q_half, axis=-1, keepdims=True)
    q_new = q + dt * qdot(q_half, omega_body(q_half))
    q_new /= np.linalg.norm(q_new, axis=-1, keepdims=True)
    # j is conserved in the world frame during the drift; store it back in the new body frame
    j_body = np.einsum("nji,nj->ni", rotation_matrices(q_new), j_world)
    return q_new, j_body


def leapfrog_rotate(state, tau, inertia_diag, dt: float):
    """
    Rotational leapfrog step on a `MoleculeState` (in place).

    j(t+dt/2) = j(t-dt/2) + dt tau (world frame), then the quaternion moves with the
    body-frame angular velocity omega = I^-1 R(q)^T j and is renormalised. A single
    vanishing moment marks the symmetry axis of a linear rotor, which never spins.

    **Raises:**
    - `ConfigurationError`: if every principal moment is zero.
    """
    inertia = np.asarray(inertia_diag, dtype=float)
    if not np.any(inertia > INERTIA_EPS):
        raise ConfigurationError(f"rotating molecule needs non-zero moments of inertia, got {tuple(inertia)}")
    inv = np.where(inertia > INERTIA_EPS, 1.0 / np.where(inertia > INERTIA_EPS, inertia, 1.0), 0.0)
    tau = np.asarray(tau, dtype=float)
    if not np.all(np.isfinite(tau)):
        raise InstabilityError("non-finite torque encountered; reduce the time step")
    q, j = _rotate(state.q.reshape(1, 4), state.j.reshape(1, 3), tau.reshape(1, 3), inv.reshape(1, 3), dt)
    state.q, state.j = q[0], j[0]
    return state


def velocity_rescale(states: States, target_T: float, species: SpeciesTable) -> float:
    """
    Scales all velocities and angular momenta by sqrt(target_T / T) in place.

    **Returns:**
    - The scaling factor lambda.

    **Raises:**
    - `CannotRescaleError`: if the current temperature is zero.
    """
    block = as_block(states)
    current = instantaneous_temperature(block, species)
    if current <= 0.0:
        raise CannotRescaleError("cannot rescale velocities of a system at zero temperature")
    factor = math.sqrt(target_T / current)
    scale_block(block, factor)
    if not isinstance(states, MoleculeBlock):
        for state, v, j in zip(states, block.v, block.j):
            state.v, state.j = v.copy(), j.copy()
    return factor


def scale_block(block: MoleculeBlock, factor: float) -> None:
    block.v *= factor
    block.j *= factor


# -----------------------------------------------------------------------------------
# Block integrators shared by the serial engine and the workers
# -----------------------------------------------------------------------------------

class Integrator:
    """Per-species constants for block-wise kicks and drifts."""

    def __init__(self, species: SpeciesTable, dt: float) -> None:
        if not dt > 0.0:
            raise ConfigurationError(f"time step must be positive, got {dt}")
        self.species = tuple(species)
        self.dt = dt
        self.masses, self.inv_inertia, rot_dof = species_arrays(self.species)
        self.rotating = rot_dof > 0

    def kick(self, block: MoleculeBlock, forces: StepForces, scale: float = 1.0) -> None:
        """v += scale dt f / m; j += scale dt R^T tau for rotating species."""
        if len(block) == 0:
            return
        if not (np.all(np.isfinite(forces.forces)) and np.all(np.isfinite(forces.torques))):
            raise InstabilityError("non-finite force or torque encountered; reduce the time step")
        h = scale * self.dt
        block.v += h * forces.forces / self.masses[block.species][:, None]
        rotating = self.rotating[block.species]
        if np.any(rotating):
            rot = rotation_matrices(block.q[rotating])
            block.j[rotating] += h * np.einsum("nji,nj->ni", rot, forces.torques[rotating])

    def full_step_kinetic(self, block: MoleculeBlock, forces: StepForces) -> Tuple[float, float]:
        """Translational and rotational kinetic energy after a half kick, without applying it."""
        if len(block) == 0:
            return 0.0, 0.0
        h = 0.5 * self.dt
        m = self.masses[block.species]
        v = block.v + h * forces.forces / m[:, None]
        trans = 0.5 * float(np.sum(m * np.einsum("ij,ij->i", v, v)))
        j = block.j.copy()
        rotating = self.rotating[block.species]
        if np.any(rotating):
            rot = rotation_matrices(block.q[rotating])
            j[rotating] += h * np.einsum("nji,nj->ni", rot, forces.torques[rotating])
        rot_energy = 0.5 * float(np.sum(j ** 2 * self.inv_inertia[block.species]))
        return trans, rot_energy

    def drift(self, block: MoleculeBlock, max_displacement: Optional[np.ndarray] = None) -> None:
        """r += dt v and orientation update for rotating species."""
        if len(block) == 0:
            return
        step = self.dt * block.v
        if max_displacement is not None and np.any(np.abs(step) > max_displacement):
            raise InstabilityError("a molecule moved more than one cell width in one step; reduce the time step")
        block.r += step
        rotating = self.rotating[block.species]
        if np.any(rotating):
            q = block.q[rotating]
            j_world = np.einsum("nij,nj->ni", rotation_matrices(q), block.j[rotating])
            block.q[rotating], block.j[rotating] = _drift_rotation(
                q, j_world, self.inv_inertia[block.species[rotating]], self.dt
            )


def kick_drift(block: MoleculeBlock, forces: StepForces, species: SpeciesTable, dt: float) -> MoleculeBlock:
    """One complete leapfrog step (translation and rotation) of a block, in place."""
    integrator = Integrator(species, dt)
    integrator.kick(block, forces)
    integrator.drift(block)
    return block


def pair_kernel(forcefield: ForceField, grid: CellGrid) -> Callable[[PairBatch], object]:
    """Adapts a `ForceField` to the `for_each_pair` kernel protocol for one grid."""
    rot = rotation_matrices(grid.q) if forcefield.needs_orientation and len(grid.q) else None

    def kernel(batch: PairBatch):
        return forcefield.evaluate(
            batch.dr,
            grid.species[batch.i],
            grid.species[batch.j],
            None if rot is None else rot[batch.i],
            None if rot is None else rot[batch.j],
        )

    return kernel


def compute_pair_forces(grid: CellGrid, forcefield: ForceField) -> StepForces:
    sums = for_each_pair(grid, pair_kernel(forcefield, grid))
    return StepForces(sums.forces, sums.torques, sums.energy, sums.virial, sums.stats)


# -----------------------------------------------------------------------------------
# Observables
# -----------------------------------------------------------------------------------

@dataclass
class StepTotals:
    """Extensive sums of one force pass; workers report these and the coordinator adds them up."""

    potential: float = 0.0
    virial: float = 0.0
    trans: float = 0.0
    rot: float = 0.0
    molecules: int = 0
    dof: int = 0
    distances_computed: int = 0
    pairs_within_cutoff: int = 0

    def __add__(self, other: "StepTotals") -> "StepTotals":
        return StepTotals(*(a + b for a, b in zip(astuple(self), astuple(other))))

    @property
    def kinetic(self) -> float:
        return self.trans + self.rot

    @property
    def temperature(self) -> float:
        return 2.0 * self.kinetic / self.dof if self.dof else 0.0


def measure(block: MoleculeBlock, forces: StepForces, integrator: "Integrator",
            full_step: bool = True) -> StepTotals:
    """
    Totals of a block right after its force pass.

    With `full_step` the stored velocities are v(t - dt/2) and the kinetic energy
    uses v(t) = v(t - dt/2) + dt f / 2m without touching the block; otherwise the
    stored velocities are taken as they are.
    """
    if full_step:
        trans, rot = integrator.full_step_kinetic(block, forces)
    else:
        trans, rot = kinetic_energy_parts(block, integrator.species)
    return StepTotals(
        potential=forces.potential,
        virial=forces.virial,
        trans=trans,
        rot=rot,
        molecules=len(block),
        dof=degrees_of_freedom(block, integrator.species),
        distances_computed=forces.stats.distances_computed,
        pairs_within_cutoff=forces.stats.pairs_within_cutoff,
    )


def thermostat_factor(totals: StepTotals, target_T: float) -> float:
    """sqrt(target_T / T) from summed totals."""
    if totals.dof == 0:
        return 1.0
    if totals.temperature <= 0.0:
        raise CannotRescaleError("cannot rescale velocities of a system at zero temperature")
    return math.sqrt(target_T / totals.temperature)


@dataclass
class StepMetrics:
    """Global observables at time t = step * dt."""

    step: int
    time: float
    kinetic: float
    potential: float
    correction: float
    temperature: float
    pressure: float
    molecules: int
    distances_computed: int = 0
    pairs_within_cutoff: int = 0
    cost_max: float = 0.0
    cost_mean: float = 0.0
    wall_ms: float = 0.0

    @property
    def total(self) -> float:
        return self.kinetic + self.potential + self.correction

    @property
    def hit_rate(self) -> float:
        return self.pairs_within_cutoff / self.distances_computed if self.distances_computed else 0.0


class LongRange:
    """Constant long-range terms: LJ tail (energy, pressure) and the reaction-field self energy."""

    def __init__(self, config: SimConfig, forcefield: ForceField, counts: Sequence[int]) -> None:
        self.energy = 0.0
        self.pressure = 0.0
        if config.long_range != "none":
            self.energy, self.pressure = tail_correction_for_system(
                counts, config.volume, forcefield.mixing, config.species, config.rc
            )
        self.energy += forcefield.self_energy(counts)


def species_counts(block: MoleculeBlock, n_species: int) -> np.ndarray:
    return np.bincount(block.species, minlength=n_species)


def summarize(step: int, config: SimConfig, totals: StepTotals, long_range: LongRange) -> StepMetrics:
    """Global metrics of step `step`; pressure is the site-site virial pressure plus tail."""
    pressure = (2.0 * totals.trans + totals.virial) / (3.0 * config.volume) + long_range.pressure
    return StepMetrics(
        step=step,
        time=step * config.dt,
        kinetic=totals.kinetic,
        potential=totals.potential,
        correction=long_range.energy,
        temperature=totals.temperature,
        pressure=pressure,
        molecules=totals.molecules,
        distances_computed=totals.distances_computed,
        pairs_within_cutoff=totals.pairs_within_cutoff,
    )


def thermostat_due(config: SimConfig, step: int) -> bool:
    return config.ensemble == "NVT" and step % config.thermostat_interval == 0


def build_forcefield(config: SimConfig, eta=None) -> ForceField:
    return ForceField(
        config.species,
        config.rc,
        lj_shifted=config.lj_shifted,
        eta=eta,
        reaction_field=config.long_range == "lj_tail+reaction_field",
        eps_rf=config.eps_rf,
    )


# -----------------------------------------------------------------------------------
# Serial engine
# -----------------------------------------------------------------------------------

MetricsCallback = Callable[[StepMetrics, MoleculeBlock], None]


class SerialEngine:
    """
    Single-domain engine: one periodic grid, no workers.

    `prepare()` evaluates the initial forces, reports step 0 from the full-step
    input velocities and moves them back by half a step. Every `step()` then kicks
    with the cached forces, applies the thermostat factor decided at the previous
    step, drifts, and evaluates the forces of the new positions.

    **Parameters:**
    - `config`: run configuration.
    - `block`: initial molecules with full-step velocities; integrated in place.
    - `eta`: optional binary interaction parameters.
    """

    def __init__(self, config: SimConfig, block: MoleculeBlock, eta=None) -> None:
        self.config = config
        self.block = block
        self.forcefield = build_forcefield(config, eta)
        self.integrator = Integrator(config.species, config.dt)
        self.grid = CellGrid.for_region(config.box, config.rc, adaptive=config.adaptive_cells,
                                        threshold=config.subdivision_threshold)
        self.long_range = LongRange(config, self.forcefield, species_counts(block, len(config.species)))
        self.step_index = 0
        self.cached: Optional[StepForces] = None
        self.scale = 1.0

    def forces(self) -> StepForces:
        """Wraps positions, rebuilds cells and halo, and evaluates all pairs."""
        self.grid = wrap_and_halo(self.grid, self.config.box, self.block)
        return compute_pair_forces(self.grid, self.forcefield)

    def _finish(self, totals: StepTotals) -> StepMetrics:
        self.scale = 1.0
        if thermostat_due(self.config, self.step_index):
            self.scale = thermostat_factor(totals, self.config.target_T)
        return summarize(self.step_index, self.config, totals, self.long_range)

    def prepare(self) -> StepMetrics:
        if self.cached is not None:
            raise RuntimeError("engine already prepared")
        self.cached = self.forces()
        metrics = self._finish(measure(self.block, self.cached, self.integrator, full_step=False))
        self.integrator.kick(self.block, self.cached, scale=-0.5)
        return metrics

    def step(self) -> StepMetrics:
        if self.cached is None:
            self.prepare()
        self.integrator.kick(self.block, self.cached)
        # lambda from the previous step's full-step temperature, applied to the fresh half-step velocities
        if self.scale != 1.0:
            scale_block(self.block, self.scale)
        self.integrator.drift(self.block, self.grid.cell_edge)
        self.step_index += 1
        self.cached = self.forces()
        return self._finish(measure(self.block, self.cached, self.integrator))

    def run(self, n_steps: int, on_step: Optional[MetricsCallback] = None) -> List[StepMetrics]:
        """Prepares and runs `n_steps` steps; returns n_steps + 1 metrics rows."""
        rows = [self.prepare()]
        if on_step is not None:
            on_step(rows[0], self.block)
        for _ in range(n_steps):
            metrics = self.step()
            if on_step is not None:
                on_step(metrics, self.block)
            rows.append(metrics)
        logger.debug("serial engine finished %d steps", n_steps)
        return rows
