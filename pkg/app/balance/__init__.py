"""
Load estimation, k-d decomposition and the multi-worker runtime.

Cell costs estimate the number of distance computations a cell causes,
n_d(i) = N_i / 2 (N_i + sum of the 26 neighbour occupancies). The decomposition
tree bisects the cell grid recursively with axis-aligned planes; every leaf is
one worker's box of at least two cells per axis.

The runtime runs one thread per worker. Workers never share mutable state:
everything they exchange goes through per-worker mailboxes as value copies.

    worker                              coordinator
    ------                              -----------
    kick, thermostat scale, drift
    Migrants     -> every peer
    HaloExport   -> every peer
    force pass on leaf + halo
    LoadReport   -> coordinator         (rebalance steps only)
    StepReport   -> coordinator         sums reports in worker-id order
                                        NewDecomposition -> all (rebalance steps)
                 <- Control             thermostat factor, stop flag

Messages carry the step they belong to; messages that arrive early are kept
until the receiver asks for them.
"""

import csv
import itertools
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.cells import CellGrid, HaloLayer, grid_dims, periodic_images, wrap_positions
from app.exceptions import (
    ConfigurationError,
    IndivisibleVolumeError,
    InstabilityError,
    OverDecomposedError,
    WorkerFailureError,
)
from app.integrate import (
    Integrator,
    LongRange,
    StepForces,
    StepMetrics,
    StepTotals,
    build_forcefield,
    compute_pair_forces,
    measure,
    scale_block,
    species_counts,
    summarize,
    thermostat_due,
    thermostat_factor,
)
from app.model import MoleculeBlock, SimConfig, States, as_block
from app.potentials import ForceField

logger = logging.getLogger(__name__)

MIN_CELLS = 2
POLL_SECONDS = 0.05
DEFAULT_TIMEOUT = 600.0


# -----------------------------------------------------------------------------------
# Cell costs
# -----------------------------------------------------------------------------------

def cell_cost(n_i: int, neighbor_counts: Sequence[int]) -> float:
    """
    Estimated distance computations of one cell: (N_i / 2) (N_i + sum N_j).

    **Example:**
    >>> cell_cost(3, [7] + [0] * 25)
    15.0
    """
    return 0.5 * n_i * (n_i + float(np.sum(neighbor_counts)))


def _costs_from_padded(padded: np.ndarray) -> np.ndarray:
    """Costs of the interior of an occupancy array that carries a one-cell ring."""
    dims = np.array(padded.shape) - 2
    window = np.zeros(tuple(dims), dtype=float)
    for dx, dy, dz in itertools.product(range(3), repeat=3):
        window += padded[dx:dx + dims[0], dy:dy + dims[1], dz:dz + dims[2]]
    return 0.5 * padded[1:-1, 1:-1, 1:-1] * window


def cell_costs(counts: np.ndarray) -> np.ndarray:
    """Cost of every cell of a periodic occupancy grid."""
    counts = np.asarray(counts)
    return _costs_from_padded(np.pad(counts, 1, mode="wrap"))


def grid_cell_costs(grid: CellGrid) -> np.ndarray:
    """Costs of a grid's owned cells, with neighbour counts taken from its halo ring."""
    dims = grid.ext_dims
    ext = grid.sub // 2 - (grid.lo - 1)
    flat = (ext[:, 0] * dims[1] + ext[:, 1]) * dims[2] + ext[:, 2]
    occupancy = np.bincount(flat, minlength=int(np.prod(dims))).reshape(tuple(dims))
    return _costs_from_padded(occupancy)


@dataclass
class CellLoad:
    counts: np.ndarray
    costs: np.ndarray

    @classmethod
    def from_positions(cls, box, rc: float, positions: np.ndarray) -> "CellLoad":
        dims = grid_dims(box, rc)
        edge = np.asarray(box, dtype=float) / dims
        cells = np.clip(np.floor(positions / edge).astype(np.int64), 0, dims - 1)
        flat = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
        counts = np.bincount(flat, minlength=int(np.prod(dims))).reshape(tuple(dims))
        return cls(counts, cell_costs(counts))


# -----------------------------------------------------------------------------------
# k-d decomposition
# -----------------------------------------------------------------------------------

def best_split(profile: Sequence[float], left_workers: int = 1, right_workers: int = 1,
               min_left: int = MIN_CELLS, min_right: int = MIN_CELLS) -> Tuple[int, float]:
    """
    Chooses the plane that best balances a 1-D load profile.

    The plane "after index i" puts profile[:i+1] on the left. Admissible planes leave
    at least `min_left` / `min_right` cells on either side. The returned plane
    minimises |L k_r - R k_l|, i.e. equalises the load per worker; ties go to the
    plane closest to the centre.

    **Returns:**
    - `(i, imbalance)` with imbalance = |L / k_l - R / k_r|.

    **Raises:**
    - `IndivisibleVolumeError`: if no plane is admissible.

    **Example:**
    >>> best_split([10, 1, 1, 1, 1, 1, 1, 2])
    (1, 4.0)
    """
    profile = np.asarray(profile, dtype=float)
    n = profile.shape[0]
    if n < min_left + min_right:
        raise IndivisibleVolumeError(
            f"cannot split {n} cells with at least {min_left} and {min_right} cells per side"
        )
    prefix = np.cumsum(profile)
    total = prefix[-1]
    candidates = np.arange(min_left - 1, n - min_right)
    left = prefix[candidates]
    right = total - left
    # zero when both sides carry the same load per worker
    score = np.abs(left * right_workers - right * left_workers)
    best = score.min()
    ties = candidates[score <= best + 1e-12 * max(abs(total), 1.0)]
    centrality = np.abs((ties + 1) - n / 2.0)
    index = int(ties[np.argmin(centrality)])
    return index, float(best / (left_workers * right_workers))


@dataclass
class Leaf:
    lo: Tuple[int, int, int]
    hi: Tuple[int, int, int]
    worker: int
    load: float

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(h - l + 1) for l, h in zip(self.lo, self.hi))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))


@dataclass
class Split:
    axis: int
    plane: int  # first global cell index of the right child
    left: "Node"
    right: "Node"


Node = Union[Leaf, Split]


class DecompositionTree:
    """Binary space partition of the cell grid; leaves are numbered 0..p-1 depth first."""

    def __init__(self, root: Node, dims: Sequence[int]) -> None:
        self.root = root
        self.dims = tuple(int(d) for d in dims)
        self._owner_map: Optional[np.ndarray] = None

    @property
    def leaves(self) -> List[Leaf]:
        found: List[Leaf] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Leaf):
                found.append(node)
            else:
                stack.extend((node.right, node.left))
        return sorted(found, key=lambda leaf: leaf.worker)

    @property
    def n_workers(self) -> int:
        return len(self.leaves)

    @property
    def owner_map(self) -> np.ndarray:
        if self._owner_map is None:
            owners = np.full(self.dims, -1, dtype=np.int64)
            for leaf in self.leaves:
                owners[leaf.slices] = leaf.worker
            self._owner_map = owners
        return self._owner_map

    def owner_of(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        return self.owner_map[cells[:, 0], cells[:, 1], cells[:, 2]]

    def leaf_loads(self, costs: np.ndarray) -> np.ndarray:
        return np.array([float(np.sum(costs[leaf.slices])) for leaf in self.leaves])


def _capacity(shape: Sequence[int]) -> int:
    """How many workers a box can host with at least two cells per axis each."""
    return int(np.prod([s // MIN_CELLS for s in shape]))


def _min_extent(workers: int, other_capacity: int) -> int:
    if other_capacity <= 0:
        return 1 << 30
    return MIN_CELLS * max(1, math.ceil(workers / other_capacity))


def _axis_order(depth: int, shape: Sequence[int], policy: str) -> List[int]:
    if policy == "longest":
        return sorted(range(3), key=lambda a: (-shape[a], a))
    return [(depth + k) % 3 for k in range(3)]


def build_tree(loads: np.ndarray, p: int, axis_policy: str = "alternate") -> DecompositionTree:
    """
    Recursive bisection of a 3-D cost array into `p` leaves.

    At every node the workers split as ceil(k/2) | floor(k/2) and the plane search
    targets that load ratio. Planes cut along alternating axes (x, y, z by depth)
    or, with `axis_policy="longest"`, along the longest extent first; if the
    preferred axis admits no plane the next one is tried.

    **Raises:**
    - `ConfigurationError`: if p < 1.
    - `OverDecomposedError`: if the grid cannot host p leaves of >= 2 cells per axis.
    """
    loads = np.asarray(loads, dtype=float)
    if p < 1:
        raise ConfigurationError(f"need at least one worker, got {p}")
    if _capacity(loads.shape) < p:
        raise OverDecomposedError(
            f"grid {loads.shape} cannot host {p} workers with at least {MIN_CELLS} cells per axis each"
        )
    counter = itertools.count()

    def build(lo: List[int], hi: List[int], k: int, depth: int) -> Node:
        region = loads[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
        if k == 1:
            return Leaf(tuple(lo), tuple(hi), next(counter), float(region.sum()))
        k_left, k_right = (k + 1) // 2, k // 2
        shape = region.shape
        for axis in _axis_order(depth, shape, axis_policy):
            others = [shape[a] for a in range(3) if a != axis]
            other_capacity = _capacity(others)
            min_left = _min_extent(k_left, other_capacity)
            min_right = _min_extent(k_right, other_capacity)
            if min_left + min_right > shape[axis]:
                continue
            profile = region.sum(axis=tuple(a for a in range(3) if a != axis))
            index, _ = best_split(profile, k_left, k_right, min_left, min_right)
            plane = lo[axis] + index + 1
            left_hi, right_lo = list(hi), list(lo)
            left_hi[axis] = plane - 1
            right_lo[axis] = plane
            left = build(list(lo), left_hi, k_left, depth + 1)
            right = build(right_lo, list(hi), k_right, depth + 1)
            return Split(axis, plane, left, right)
        raise OverDecomposedError(f"cannot split box {tuple(lo)}..{tuple(hi)} among {k} workers")

    root = build([0, 0, 0], [d - 1 for d in loads.shape], p, 0)
    return DecompositionTree(root, loads.shape)


def uniform_tree(dims: Sequence[int], p: int, axis_policy: str = "alternate") -> DecompositionTree:
    """Volume-only decomposition: the k-d tree of a uniform load field."""
    return build_tree(np.ones(tuple(int(d) for d in dims)), p, axis_policy)


def imbalance(tree: DecompositionTree, costs: np.ndarray) -> float:
    """Max leaf load over mean leaf load; 1.0 for an empty system."""
    loads = tree.leaf_loads(costs)
    mean = float(loads.mean())
    return float(loads.max() / mean) if mean > 0.0 else 1.0


# -----------------------------------------------------------------------------------
# Messages
# -----------------------------------------------------------------------------------

@dataclass(frozen=True)
class HaloExport:
    """Position and orientation snapshots of the sender's molecules in the receiver's halo."""

    step: int
    sender: int
    snapshots: HaloLayer


@dataclass(frozen=True)
class Migrants:
    step: int
    sender: int
    molecules: MoleculeBlock


@dataclass(frozen=True)
class LoadReport:
    step: int
    sender: int
    lo: Tuple[int, int, int]
    costs: np.ndarray
    molecules: int
    busy_ms: float


@dataclass(frozen=True)
class NewDecomposition:
    step: int
    tree: DecompositionTree


@dataclass(frozen=True)
class StepReport:
    step: int
    sender: int
    totals: StepTotals
    cost: float
    busy_ms: float
    snapshot: Optional[MoleculeBlock] = None


@dataclass(frozen=True)
class Control:
    step: int
    scale: float
    stop: bool


@dataclass(frozen=True)
class Finished:
    step: int
    sender: int
    molecules: MoleculeBlock


@dataclass(frozen=True)
class WorkerFailed:
    step: int
    sender: int
    error: BaseException


WorkerMessage = Union[HaloExport, Migrants, LoadReport, NewDecomposition, StepReport, Control, Finished,
                      WorkerFailed]


class _Aborted(Exception):
    """Raised inside a worker when another participant aborted the run."""


class Mailbox:
    """Ordered inbox of one participant with buffering of early messages."""

    def __init__(self, abort: threading.Event, timeout: Optional[float] = DEFAULT_TIMEOUT) -> None:
        self._queue: "queue.Queue[WorkerMessage]" = queue.Queue()
        self._pending: List[WorkerMessage] = []
        self._abort = abort
        self._timeout = timeout

    def put(self, message: WorkerMessage) -> None:
        self._queue.put(message)

    def _next(self) -> WorkerMessage:
        waited = 0.0
        while True:
            # queued messages first: a failure report is posted before the abort flag is set
            try:
                return self._queue.get(timeout=POLL_SECONDS)
            except queue.Empty:
                if self._abort.is_set():
                    raise _Aborted()
                waited += POLL_SECONDS
                if self._timeout is not None and waited > self._timeout:
                    raise WorkerFailureError(f"no message received for {self._timeout:.0f} s")

    def collect(self, kind: type, step: int, count: int) -> List[WorkerMessage]:
        """Waits for `count` messages of `kind` tagged with `step`, sorted by sender."""
        matched = [m for m in self._pending if isinstance(m, kind) and m.step == step]
        self._pending = [m for m in self._pending if not (isinstance(m, kind) and m.step == step)]
        while len(matched) < count:
            message = self._next()
            if isinstance(message, WorkerFailed):
                self._abort.set()
                if isinstance(message.error, InstabilityError):
                    raise message.error
                raise WorkerFailureError(
                    f"worker {message.sender} failed at step {message.step}: {message.error!r}"
                ) from message.error
            if isinstance(message, kind) and message.step == step:
                matched.append(message)
            else:
                self._pending.append(message)
        return sorted(matched, key=lambda m: getattr(m, "sender", 0))


# -----------------------------------------------------------------------------------
# Workers
# -----------------------------------------------------------------------------------

@dataclass
class Runtime:
    """Read-only run context shared by all workers."""

    config: SimConfig
    forcefield: ForceField
    integrator: Integrator
    mailboxes: List[Mailbox]
    coordinator: Mailbox
    abort: threading.Event

    @property
    def p(self) -> int:
        return len(self.mailboxes)

    def rebalance_due(self, step: int) -> bool:
        return (self.config.decomposition == "kdtree" and step > 0
                and step % self.config.rebalance_interval == 0)

    def snapshot_due(self, step: int) -> bool:
        interval = self.config.trajectory_interval
        return interval > 0 and step % interval == 0


class Worker(threading.Thread):
    """Owns the molecules of one leaf and integrates them."""

    def __init__(self, worker_id: int, runtime: Runtime, block: MoleculeBlock, tree: DecompositionTree) -> None:
        super().__init__(name=f"worker-{worker_id}", daemon=True)
        self.worker_id = worker_id
        self.runtime = runtime
        self.block = block
        self.scale = 1.0
        self.cached: Optional[StepForces] = None
        self.busy_since_rebalance = 0.0
        self._adopt(tree)

    def _adopt(self, tree: DecompositionTree) -> None:
        config = self.runtime.config
        self.tree = tree
        self.leaf = tree.leaves[self.worker_id]
        self.grid = CellGrid.for_region(config.box, config.rc, lo=self.leaf.lo, hi=self.leaf.hi,
                                        adaptive=config.adaptive_cells, threshold=config.subdivision_threshold)

    @property
    def inbox(self) -> Mailbox:
        return self.runtime.mailboxes[self.worker_id]

    def _send(self, peer: int, message: WorkerMessage) -> None:
        self.runtime.mailboxes[peer].put(message)

    def _peers(self):
        return (w for w in range(self.runtime.p) if w != self.worker_id)

    def run(self) -> None:
        step = 0
        try:
            step = self._loop()
        except _Aborted:
            logger.debug("%s stopping after abort", self.name)
        except BaseException as exc:  # reported to the coordinator, which aborts the run
            logger.error("%s failed at step %d: %s", self.name, step, exc)
            self.runtime.coordinator.put(WorkerFailed(step, self.worker_id, exc))
            self.runtime.abort.set()

    def _loop(self) -> int:
        integrator = self.runtime.integrator
        step = 0
        started = time.thread_time()
        self._exchange(step)
        control = self._report(step, full_step=False, started=started)
        integrator.kick(self.block, self.cached, scale=-0.5)
        while not control.stop:
            started = time.thread_time()
            integrator.kick(self.block, self.cached)
            # factor the coordinator sent for the previous step
            if self.scale != 1.0:
                scale_block(self.block, self.scale)
            integrator.drift(self.block, self.grid.cell_edge)
            step += 1
            self._migrate(step)
            self._exchange(step)
            control = self._report(step, full_step=True, started=started)
        self.runtime.coordinator.put(Finished(step, self.worker_id, self.block.copy()))
        return step

    def _migrate(self, step: int) -> None:
        self.block.r = wrap_positions(self.block.r, self.grid.box, self.grid.cell_edge)
        owners = self.tree.owner_of(self.grid.full_cell_index(self.block.r))
        for peer in self._peers():
            self._send(peer, Migrants(step, self.worker_id, self.block.take(owners == peer)))
        leaving = owners != self.worker_id
        if np.any(leaving):
            self.block = self.block.take(~leaving)
        incoming = self.inbox.collect(Migrants, step, self.runtime.p - 1)
        arrived = [m.molecules for m in incoming if len(m.molecules)]
        if arrived:
            self.block = MoleculeBlock.concatenate([self.block, *arrived])
        logger.debug("%s step %d: %d left, %d arrived", self.name, step, int(leaving.sum()),
                     sum(len(a) for a in arrived))

    def _exchange(self, step: int) -> None:
        grid = self.grid
        sub = grid.subcell_index(self.block.r)
        for peer in self._peers():
            target = self.tree.leaves[peer]
            layer = periodic_images(self.block, sub, grid.global_dims, grid.box,
                                    np.asarray(target.lo), np.asarray(target.hi), local=False)
            self._send(peer, HaloExport(step, self.worker_id, layer))
        local = periodic_images(self.block, sub, grid.global_dims, grid.box, grid.lo, grid.hi, local=True)
        incoming = self.inbox.collect(HaloExport, step, self.runtime.p - 1)
        halo = HaloLayer.concatenate([local, *(m.snapshots for m in incoming)])
        self.grid = CellGrid(box=grid.box, rc=grid.rc, global_dims=grid.global_dims, lo=grid.lo, hi=grid.hi,
                             cell_edge=grid.cell_edge, adaptive=grid.adaptive,
                             threshold=grid.threshold).populate(self.block, halo)
        self.cached = compute_pair_forces(self.grid, self.runtime.forcefield)

    def _report(self, step: int, full_step: bool, started: float) -> Control:
        runtime = self.runtime
        totals = measure(self.block, self.cached, runtime.integrator, full_step=full_step)
        costs = grid_cell_costs(self.grid)
        snapshot = self.block.copy() if runtime.snapshot_due(step) else None
        busy_ms = (time.thread_time() - started) * 1000.0
        self.busy_since_rebalance += busy_ms
        if runtime.rebalance_due(step):
            runtime.coordinator.put(LoadReport(step, self.worker_id, self.leaf.lo, costs, len(self.block),
                                               self.busy_since_rebalance))
            self.busy_since_rebalance = 0.0
        runtime.coordinator.put(StepReport(step, self.worker_id, totals, float(costs.sum()), busy_ms, snapshot))
        if runtime.rebalance_due(step):
            decomposition = self.inbox.collect(NewDecomposition, step, 1)[0]
            self._adopt(decomposition.tree)
        control = self.inbox.collect(Control, step, 1)[0]
        self.scale = control.scale
        return control


# -----------------------------------------------------------------------------------
# Load trace
# -----------------------------------------------------------------------------------

LOAD_TRACE_HEADER = ("step", "worker", "cells", "molecules", "estimated_cost", "wall_ms")


@dataclass(frozen=True)
class LoadTraceRow:
    step: int
    worker: int
    cells: int
    molecules: int
    estimated_cost: float
    wall_ms: float


class LoadTraceWriter:
    """Writes one CSV row per worker and rebalance event."""

    def __init__(self, path: Union[str, Path]) -> None:
        self.path = Path(path)
        self._handle = self.path.open("w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._handle, lineterminator="\n")
        self._writer.writerow(LOAD_TRACE_HEADER)

    def write(self, rows: Sequence[LoadTraceRow]) -> None:
        for row in rows:
            self._writer.writerow([row.step, row.worker, row.cells, row.molecules,
                                   f"{row.estimated_cost:.17g}", f"{row.wall_ms:.3f}"])
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "LoadTraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# -----------------------------------------------------------------------------------
# Coordinator
# -----------------------------------------------------------------------------------

@dataclass
class ParallelResult:
    """
    Outcome of a parallel run.

    `critical_path_s` sums, over steps, the largest per-worker CPU time of the step;
    it is the run time an ideal machine with one core per worker would see.
    """

    metrics: List[StepMetrics]
    block: MoleculeBlock
    tree: DecompositionTree
    critical_path_s: float
    wall_s: float
    load_trace: List[LoadTraceRow]


StepCallback = Callable[[StepMetrics, Optional[MoleculeBlock]], None]


def initial_tree(config: SimConfig, load: CellLoad) -> DecompositionTree:
    if config.decomposition == "uniform":
        return uniform_tree(load.counts.shape, config.workers, config.axis_policy)
    return build_tree(load.costs, config.workers, config.axis_policy)


def run_parallel(config: SimConfig, states: States, eta=None, on_step: Optional[StepCallback] = None,
                 load_trace: Optional[LoadTraceWriter] = None,
                 timeout: Optional[float] = DEFAULT_TIMEOUT) -> ParallelResult:
    """
    Runs `config.n_steps` steps with `config.workers` worker threads.

    **Parameters:**
    - `config`: run configuration; `workers`, `decomposition`, `rebalance_interval`
      and `trajectory_interval` steer the runtime.
    - `states`: initial molecules with full-step velocities (not modified).
    - `on_step`: called for every step (0..n_steps) with the metrics and, on
      trajectory steps, all molecules sorted by id.
    - `load_trace`: optional writer for rebalance events.

    **Raises:**
    - `InstabilityError`: if a worker's integration blew up.
    - `WorkerFailureError`: if a worker failed otherwise or bookkeeping broke.
    """
    wall_start = time.perf_counter()
    block = as_block(states).copy()
    p = config.workers
    box = config.box_array
    dims = grid_dims(box, config.rc)
    block.r = wrap_positions(block.r, box, box / dims)
    load = CellLoad.from_positions(box, config.rc, block.r)
    tree = initial_tree(config, load)
    forcefield = build_forcefield(config, eta)
    integrator = Integrator(config.species, config.dt)
    long_range = LongRange(config, forcefield, species_counts(block, len(config.species)))
    abort = threading.Event()
    runtime = Runtime(config, forcefield, integrator, [Mailbox(abort, timeout) for _ in range(p)],
                      Mailbox(abort, timeout), abort)
    edge = box / dims
    owners = tree.owner_of(np.clip(np.floor(block.r / edge).astype(np.int64), 0, dims - 1))
    workers = [Worker(w, runtime, block.take(owners == w), tree) for w in range(p)]
    n_molecules = len(block)

    trace = _trace_rows(0, tree, load.costs, [int(np.sum(owners == w)) for w in range(p)], [0.0] * p)
    if load_trace is not None:
        load_trace.write(trace)
    logger.info("starting %d worker(s), %d molecules, initial max/mean load %.3f",
                p, n_molecules, imbalance(tree, load.costs))

    metrics_rows: List[StepMetrics] = []
    critical_ms = 0.0
    for worker in workers:
        worker.start()
    try:
        for step in range(config.n_steps + 1):
            reports = runtime.coordinator.collect(StepReport, step, p)
            totals = StepTotals()
            for report in reports:
                totals = totals + report.totals
            if totals.molecules != n_molecules:
                raise WorkerFailureError(f"molecule count changed from {n_molecules} to {totals.molecules}"
                                         f" at step {step}")
            metrics = summarize(step, config, totals, long_range)
            costs = np.array([r.cost for r in reports])
            metrics.cost_max = float(costs.max())
            metrics.cost_mean = float(costs.mean())
            metrics.wall_ms = max(r.busy_ms for r in reports)
            critical_ms += metrics.wall_ms
            scale = thermostat_factor(totals, config.target_T) if thermostat_due(config, step) else 1.0
            if runtime.rebalance_due(step):
                tree = _rebalance(runtime, step, tree, load_trace, trace)
            if on_step is not None:
                snapshots = [r.snapshot for r in reports if r.snapshot is not None]
                snapshot = MoleculeBlock.concatenate(snapshots).sort_by_id() if snapshots else None
                on_step(metrics, snapshot)
            metrics_rows.append(metrics)
            for mailbox in runtime.mailboxes:
                mailbox.put(Control(step, scale, step == config.n_steps))
        finals = runtime.coordinator.collect(Finished, config.n_steps, p)
    except _Aborted:
        raise WorkerFailureError("run aborted by a worker") from None
    except BaseException:
        abort.set()
        raise
    finally:
        for worker in workers:
            worker.join(timeout=5.0)
    final = MoleculeBlock.concatenate([f.molecules for f in finals]).sort_by_id()
    result = ParallelResult(metrics_rows, final, tree, critical_ms / 1000.0,
                            time.perf_counter() - wall_start, trace)
    logger.info("run finished: %d steps, critical path %.3f s, wall %.3f s",
                config.n_steps, result.critical_path_s, result.wall_s)
    return result


def _trace_rows(step: int, tree: DecompositionTree, costs: np.ndarray, molecules: Sequence[int],
                wall_ms: Sequence[float]) -> List[LoadTraceRow]:
    loads = tree.leaf_loads(costs)
    return [LoadTraceRow(step, leaf.worker, leaf.n_cells, int(molecules[leaf.worker]), float(loads[leaf.worker]),
                         float(wall_ms[leaf.worker])) for leaf in tree.leaves]


def _rebalance(runtime: Runtime, step: int, tree: DecompositionTree, writer: Optional[LoadTraceWriter],
               trace: List[LoadTraceRow]) -> DecompositionTree:
    reports = runtime.coordinator.collect(LoadReport, step, runtime.p)
    costs = np.zeros(tree.dims)
    for report in reports:
        lo = report.lo
        shape = report.costs.shape
        costs[lo[0]:lo[0] + shape[0], lo[1]:lo[1] + shape[1], lo[2]:lo[2] + shape[2]] = report.costs
    rows = _trace_rows(step, tree, costs, [r.molecules for r in reports], [r.busy_ms for r in reports])
    trace.extend(rows)
    if writer is not None:
        writer.write(rows)
    before = imbalance(tree, costs)
    new_tree = build_tree(costs, runtime.p, runtime.config.axis_policy)
    logger.info("step %d: rebalanced, max/mean load %.3f -> %.3f", step, before, imbalance(new_tree, costs))
    for mailbox in runtime.mailboxes:
        mailbox.put(NewDecomposition(step, new_tree))
    return new_tree
