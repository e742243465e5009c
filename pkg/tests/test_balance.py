# tests/test_balance.py

"""
Unit tests for load estimation, the k-d decomposition, worker mailboxes and the
multi-worker runtime (checked against the serial engine).
"""

import itertools
import threading
import time

import numpy as np
import pytest

from app.balance import (
    CellLoad,
    Control,
    LoadTraceWriter,
    Mailbox,
    WorkerFailed,
    best_split,
    build_tree,
    cell_cost,
    cell_costs,
    imbalance,
    run_parallel,
    uniform_tree,
)
from app.cells import minimum_image
from app.exceptions import (
    ConfigurationError,
    IndivisibleVolumeError,
    InstabilityError,
    OverDecomposedError,
    WorkerFailureError,
)
from app.integrate import SerialEngine
from app.scenarios import ScenarioSpec, generate


def fluid(n, density, **run):
    return generate(ScenarioSpec(kind="homogeneous", n=n, density=density, temperature=0.95, seed=17), **run)


def assert_tiles(tree, dims):
    """Leaves cover every cell exactly once and keep two cells per axis."""
    owners = tree.owner_map
    assert owners.shape == tuple(dims)
    assert np.all(owners >= 0)
    for leaf in tree.leaves:
        assert min(leaf.shape) >= 2
        assert np.count_nonzero(owners == leaf.worker) == leaf.n_cells
    assert sum(leaf.n_cells for leaf in tree.leaves) == int(np.prod(dims))
    assert [leaf.worker for leaf in tree.leaves] == list(range(tree.n_workers))


# -----------------------------------------------------------------------------------
# Cell costs
# -----------------------------------------------------------------------------------

@pytest.mark.parametrize("n_i, neighbours, expected", [
    (0, [5] * 26, 0.0),
    (3, [7] + [0] * 25, 15.0),
    (2, [0] * 26, 2.0),
])
def test_cell_cost_examples(n_i, neighbours, expected):
    """(N_i / 2) (N_i + sum of neighbour counts)."""
    assert cell_cost(n_i, neighbours) == expected


def test_cell_costs_use_periodic_neighbours(rng):
    """The array version agrees with the scalar formula on a periodic grid."""
    # Arrange
    counts = rng.integers(0, 6, (4, 5, 3))

    # Act
    costs = cell_costs(counts)

    # Assert
    for cell in itertools.product(*(range(d) for d in counts.shape)):
        neighbours = [counts[tuple((np.array(cell) + o) % counts.shape)]
                      for o in itertools.product((-1, 0, 1), repeat=3) if any(o)]
        assert costs[cell] == pytest.approx(cell_cost(counts[cell], neighbours))
    assert np.all(costs >= 0.0)


def test_cell_load_from_positions(rng):
    """Occupancy counts every molecule once; costs follow from the counts."""
    box = np.array([10.0, 12.5, 7.5])
    positions = rng.uniform(0.0, 1.0, (300, 3)) * box
    load = CellLoad.from_positions(box, 2.5, positions)
    assert load.counts.shape == (4, 5, 3)
    assert load.counts.sum() == 300
    assert np.array_equal(load.costs, cell_costs(load.counts))


# -----------------------------------------------------------------------------------
# Plane search
# -----------------------------------------------------------------------------------

@pytest.mark.parametrize("profile, expected", [
    ([4, 4, 4, 4], (1, 0.0)),
    ([10, 1, 1, 1, 1, 1, 1, 2], (1, 4.0)),
    ([1, 1, 1, 1, 1, 1], (2, 0.0)),
    ([1, 1, 0, 0, 1, 1], (2, 0.0)),
])
def test_best_split_examples(profile, expected):
    """Balanced sides; equal scores go to the most central plane."""
    assert best_split(profile) == expected


def test_best_split_targets_worker_ratio():
    """Three workers split 2 | 1: the left side gets two thirds of the load."""
    assert best_split([1] * 9, 2, 1) == (5, 0.0)


def test_best_split_rejects_short_profiles():
    with pytest.raises(IndivisibleVolumeError):
        best_split([1, 2, 3])


@pytest.mark.parametrize("seed", range(25))
def test_best_split_is_optimal(seed):
    """Exhaustive search over admissible planes finds no smaller imbalance."""
    # Arrange
    rng = np.random.default_rng(seed)
    profile = rng.integers(0, 50, int(rng.integers(4, 33)))

    # Act
    index, score = best_split(profile)

    # Assert
    scores = [abs(int(profile[:i + 1].sum()) - int(profile[i + 1:].sum())) for i in range(1, len(profile) - 2)]
    assert score == min(scores)
    assert abs(int(profile[:index + 1].sum()) - int(profile[index + 1:].sum())) == min(scores)
    assert 1 <= index <= len(profile) - 3


@pytest.mark.slow
@pytest.mark.parametrize("left_workers, right_workers", [(1, 1), (2, 1), (1, 2), (3, 2)])
def test_best_split_is_optimal_for_uneven_worker_counts(left_workers, right_workers):
    """2500 random profiles per worker split; no admissible plane balances load per worker better."""
    rng = np.random.default_rng(1000 * left_workers + right_workers)
    for _ in range(2500):
        profile = rng.integers(0, 50, int(rng.integers(4, 33)))

        index, score = best_split(profile, left_workers, right_workers)

        per_worker = [abs(profile[:i + 1].sum() / left_workers - profile[i + 1:].sum() / right_workers)
                      for i in range(1, len(profile) - 2)]
        assert score == pytest.approx(min(per_worker), abs=1e-9)
        assert per_worker[index - 1] == pytest.approx(min(per_worker), abs=1e-9)


# -----------------------------------------------------------------------------------
# Decomposition trees
# -----------------------------------------------------------------------------------

def test_uniform_octants():
    """Uniform loads on 8^3 cells with 8 workers: 4^3 octants."""
    tree = build_tree(np.ones((8, 8, 8)), 8)
    assert_tiles(tree, (8, 8, 8))
    assert all(leaf.shape == (4, 4, 4) for leaf in tree.leaves)
    assert tree.leaf_loads(np.ones((8, 8, 8))).tolist() == [64.0] * 8


def test_single_worker_owns_everything():
    tree = build_tree(np.ones((3, 4, 5)), 1)
    assert len(tree.leaves) == 1
    assert tree.leaves[0].lo == (0, 0, 0)
    assert tree.leaves[0].hi == (2, 3, 4)


@pytest.mark.parametrize("seed", range(15))
def test_trees_partition_random_grids(seed):
    """Leaves tile the grid and their loads add up to the total cost."""
    # Arrange
    rng = np.random.default_rng(100 + seed)
    dims = tuple(int(d) for d in rng.integers(4, 11, 3))
    costs = rng.exponential(1.0, dims)
    p = int(rng.integers(1, 9))

    # Act
    tree = build_tree(costs, p, axis_policy=("alternate", "longest")[seed % 2])

    # Assert
    assert tree.n_workers == p
    assert_tiles(tree, dims)
    assert tree.leaf_loads(costs).sum() == pytest.approx(costs.sum(), rel=1e-12)


def test_odd_worker_counts_split_unevenly():
    """Three workers on 8^3 uniform cells: a 2 | 1 split by load."""
    tree = build_tree(np.ones((8, 8, 8)), 3)
    assert_tiles(tree, (8, 8, 8))
    assert sorted(leaf.n_cells for leaf in tree.leaves) == [160, 160, 192]


def test_axis_policies():
    """Alternating axes cut x then y; the longest-extent policy keeps cutting x."""
    loads = np.ones((16, 4, 4))
    alternate = build_tree(loads, 4)
    longest = build_tree(loads, 4, axis_policy="longest")
    assert {leaf.shape for leaf in alternate.leaves} == {(8, 2, 4)}
    assert {leaf.shape for leaf in longest.leaves} == {(4, 4, 4)}


def test_over_decomposition_is_rejected():
    """Three cells per axis host only one worker."""
    with pytest.raises(OverDecomposedError):
        build_tree(np.ones((3, 3, 3)), 2)
    with pytest.raises(ConfigurationError):
        build_tree(np.ones((4, 4, 4)), 0)


def test_kdtree_beats_volume_split_on_a_dense_block():
    """A dense 4^3 block inside a 16^3 grid: cost-based leaves are better balanced."""
    # Arrange
    costs = np.full((16, 16, 16), 0.01)
    costs[2:6, 2:6, 2:6] = 100.0

    # Act
    kd = imbalance(build_tree(costs, 4), costs)
    uniform = imbalance(uniform_tree(costs.shape, 4), costs)

    # Assert
    assert kd < uniform
    assert uniform > 3.5


def test_imbalance_of_empty_system():
    assert imbalance(uniform_tree((4, 4, 4), 2), np.zeros((4, 4, 4))) == 1.0


@pytest.mark.slow
def test_droplet_balance_quality():
    """Off-centre droplet, 8 workers: k-d leaves within 1.3x of the mean, octants at least 2x."""
    # Arrange
    config, block = generate(ScenarioSpec(kind="droplet", box=(80.0, 80.0, 80.0), offset=0.1, seed=2))
    load = CellLoad.from_positions(config.box, config.rc, block.r)

    # Act
    kd = imbalance(build_tree(load.costs, 8), load.costs)
    octants = imbalance(uniform_tree(load.counts.shape, 8), load.costs)

    # Assert
    assert kd <= 1.3
    assert octants >= 2.0


# -----------------------------------------------------------------------------------
# Mailboxes
# -----------------------------------------------------------------------------------

def test_mailbox_keeps_early_messages():
    """A message for a later step waits until it is asked for."""
    # Arrange
    mailbox = Mailbox(threading.Event(), timeout=1.0)
    mailbox.put(Control(1, 2.0, False))
    mailbox.put(Control(0, 1.0, False))

    # Act
    first = mailbox.collect(Control, 0, 1)
    second = mailbox.collect(Control, 1, 1)

    # Assert
    assert first == [Control(0, 1.0, False)]
    assert second == [Control(1, 2.0, False)]


def test_mailbox_reports_failed_workers():
    """A failure message aborts the run; instabilities keep their type."""
    # Arrange
    abort = threading.Event()
    mailbox = Mailbox(abort, timeout=1.0)
    mailbox.put(WorkerFailed(3, 1, RuntimeError("boom")))

    # Act & Assert
    with pytest.raises(WorkerFailureError, match="worker 1 failed at step 3"):
        mailbox.collect(Control, 3, 1)
    assert abort.is_set()

    mailbox.put(WorkerFailed(4, 0, InstabilityError("blew up")))
    with pytest.raises(InstabilityError):
        mailbox.collect(Control, 4, 1)


def test_mailbox_times_out():
    with pytest.raises(WorkerFailureError, match="no message"):
        Mailbox(threading.Event(), timeout=0.1).collect(Control, 0, 1)


# -----------------------------------------------------------------------------------
# Parallel runtime
# -----------------------------------------------------------------------------------

@pytest.mark.parametrize("ensemble", ["NVE", "NVT"])
def test_single_worker_matches_serial_bit_for_bit(ensemble):
    """p = 1 reproduces the serial engine exactly for 100 steps."""
    # Arrange
    config, block = fluid(125, 0.6223, n_steps=100, ensemble=ensemble, target_T=1.1)

    # Act
    engine = SerialEngine(config, block.copy())
    serial_rows = engine.run(config.n_steps)
    serial_block = engine.block.sort_by_id()
    result = run_parallel(config, block)

    # Assert
    assert len(result.metrics) == len(serial_rows) == 101
    for mine, theirs in zip(result.metrics, serial_rows):
        assert (mine.kinetic, mine.potential, mine.pressure) == (theirs.kinetic, theirs.potential, theirs.pressure)
    assert np.array_equal(result.block.r, serial_block.r)
    assert np.array_equal(result.block.v, serial_block.v)


@pytest.mark.parametrize("workers", [2, 4, 8])
def test_workers_match_serial(workers):
    """Several workers with migration and rebalancing follow the serial trajectory."""
    # Arrange
    config, block = fluid(1000, 0.4, n_steps=10, workers=workers, rebalance_interval=5)
    engine = SerialEngine(config, block.copy())
    serial_rows = engine.run(config.n_steps)

    # Act
    result = run_parallel(config, block)

    # Assert
    reference = engine.block.sort_by_id()
    assert np.array_equal(result.block.ids, reference.ids)
    assert np.abs(minimum_image(result.block.r - reference.r, config.box_array)).max() < 1e-9
    assert all(row.molecules == 1000 for row in result.metrics)
    for mine, theirs in zip(result.metrics, serial_rows):
        assert mine.potential == pytest.approx(theirs.potential, rel=1e-9)
        assert mine.total == pytest.approx(theirs.total, rel=1e-9)
    assert result.tree.n_workers == workers
    assert result.critical_path_s >= 0.0


@pytest.mark.slow
@pytest.mark.parametrize("workers", [2, 4, 8])
def test_workers_match_serial_over_100_steps(workers):
    """100 steps with a rebalance every 25: energies track the serial run to 1e-9."""
    # Arrange
    config, block = fluid(1000, 0.4, n_steps=100, workers=workers, rebalance_interval=25)
    engine = SerialEngine(config, block.copy())
    serial_rows = engine.run(config.n_steps)

    # Act
    result = run_parallel(config, block)

    # Assert
    reference = engine.block.sort_by_id()
    assert len(result.metrics) == 101
    assert np.abs(minimum_image(result.block.r - reference.r, config.box_array)).max() < 1e-9
    for mine, theirs in zip(result.metrics, serial_rows):
        assert mine.potential == pytest.approx(theirs.potential, rel=1e-9)
        assert mine.total == pytest.approx(theirs.total, rel=1e-9)


@pytest.mark.slow
def test_single_worker_overhead_is_small():
    """The p = 1 runtime stays within 10% of the serial engine."""
    # Arrange
    config, block = fluid(1000, 0.6223, n_steps=100)
    SerialEngine(config, block.copy()).run(5)

    # Act
    started = time.perf_counter()
    SerialEngine(config, block.copy()).run(config.n_steps)
    serial_s = time.perf_counter() - started
    result = run_parallel(config, block)

    # Assert
    assert result.wall_s <= 1.10 * serial_s


def test_two_workers_on_small_system():
    """p = 2, N = 400, 10 steps: positions within 1e-9 of the serial run."""
    # Arrange
    config, block = fluid(400, 0.35, n_steps=10, workers=2)
    engine = SerialEngine(config, block.copy())
    engine.run(config.n_steps)

    # Act
    result = run_parallel(config, block)

    # Assert
    deviation = minimum_image(result.block.r - engine.block.sort_by_id().r, config.box_array)
    assert np.abs(deviation).max() < 1e-9


def test_load_trace_records_rebalances(tmp_path):
    """One row per worker at the start and at every rebalance; molecules add up."""
    # Arrange
    config, block = fluid(1000, 0.4, n_steps=6, workers=2, rebalance_interval=3)
    path = tmp_path / "loadtrace.csv"

    # Act
    with LoadTraceWriter(path) as writer:
        result = run_parallel(config, block, load_trace=writer)

    # Assert
    assert [row.step for row in result.load_trace] == [0, 0, 3, 3, 6, 6]
    for step in (0, 3, 6):
        assert sum(row.molecules for row in result.load_trace if row.step == step) == 1000
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "step,worker,cells,molecules,estimated_cost,wall_ms"
    assert len(lines) == 7


def test_uniform_decomposition_never_rebalances():
    config, block = fluid(1000, 0.4, n_steps=4, workers=4, decomposition="uniform", rebalance_interval=2)
    result = run_parallel(config, block)
    assert {row.step for row in result.load_trace} == {0}
    assert len(result.metrics) == 5


def test_snapshots_on_trajectory_steps():
    """on_step sees every step; molecules come along every trajectory_interval steps."""
    # Arrange
    config, block = fluid(400, 0.35, n_steps=4, workers=2, trajectory_interval=2)
    seen = []

    # Act
    run_parallel(config, block, on_step=lambda metrics, snapshot: seen.append((metrics.step, snapshot)))

    # Assert
    assert [step for step, _ in seen] == [0, 1, 2, 3, 4]
    assert [snapshot is not None for _, snapshot in seen] == [True, False, True, False, True]
    assert seen[2][1].ids.tolist() == list(range(400))


def test_worker_failure_aborts_the_run(monkeypatch):
    """An exception inside a worker surfaces as WorkerFailureError."""
    config, block = fluid(400, 0.35, n_steps=3, workers=2)

    def broken(grid, forcefield):
        raise RuntimeError("force pass failed")

    monkeypatch.setattr("app.balance.compute_pair_forces", broken)
    with pytest.raises(WorkerFailureError):
        run_parallel(config, block, timeout=10.0)
