"""
Linked-cell neighbour search with adaptive half-size subcells and halo layers.

A `CellGrid` covers one box of cells of the global grid (the whole grid for a
serial run, one decomposition leaf for a worker) surrounded by a one-cell halo
ring. Cell edges are box / floor(box / rc) per axis, so every edge is >= rc and
all cells have the same size.

Molecules are binned once per step on the half-size subcell lattice; the full
cell of a molecule is its subcell index divided by two, so both levels always
agree. Halo copies never get binned from their (shifted) coordinates: their
subcell index is the source index moved by a whole number of periods.

Pair enumeration walks a forward half stencil (13 neighbours plus the cell
itself, or 62 plus itself on the subcell level) and generates all candidate
pairs of one stencil offset in a single vectorised pass. Rules:

- owned / owned pairs are visited once and act on both molecules;
- owned / halo pairs whose halo entry is a periodic image of a molecule owned by
  the same grid are visited once (the copy with the smaller owned id wins) and
  act on both originals;
- owned / halo pairs whose halo entry belongs to another worker act on the owned
  molecule only and contribute half of their energy and virial, so that the
  worker sums add up to the global totals;
- halo / halo pairs are never visited.

With adaptive cells, cells holding more than `threshold` molecules are split
into 2x2x2 subcells. Pairs with at least one partner in a refined cell are found
on the subcell level, all other pairs on the full-cell level.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import ConfigurationError, InstabilityError
from app.model import MoleculeBlock

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 8


def _forward_offsets(reach: int) -> List[Tuple[int, int, int]]:
    """Offsets in [-reach, reach]^3 that are lexicographically positive, plus (0, 0, 0)."""
    offsets = [(0, 0, 0)]
    for o in itertools.product(range(-reach, reach + 1), repeat=3):
        if o > (0, 0, 0):
            offsets.append(o)
    return offsets


FULL_STENCIL = _forward_offsets(1)   # 1 + 13
SUB_STENCIL = _forward_offsets(2)    # 1 + 62


# -----------------------------------------------------------------------------------
# Statistics and results
# -----------------------------------------------------------------------------------

@dataclass
class PairTraversalStats:
    distances_computed: int = 0
    pairs_within_cutoff: int = 0

    @property
    def hit_rate(self) -> float:
        if self.distances_computed == 0:
            return 0.0
        return self.pairs_within_cutoff / self.distances_computed

    def merge(self, other: "PairTraversalStats") -> "PairTraversalStats":
        return PairTraversalStats(self.distances_computed + other.distances_computed,
                                  self.pairs_within_cutoff + other.pairs_within_cutoff)


@dataclass
class PairBatch:
    """
    Pairs of one stencil offset that lie within the cutoff.

    `i`, `j` index the grid's combined arrays (owned molecules first, then halo);
    `dr = r[i] - r[j]`.
    """

    grid: "CellGrid"
    i: np.ndarray
    j: np.ndarray
    dr: np.ndarray

    @property
    def ids_i(self) -> np.ndarray:
        return self.grid.ids[self.i]

    @property
    def ids_j(self) -> np.ndarray:
        return self.grid.ids[self.j]

    def __len__(self) -> int:
        return int(self.i.shape[0])


@dataclass
class PairSums:
    """Forces and torques on owned molecules plus energy and virial of one traversal."""

    forces: np.ndarray
    torques: np.ndarray
    energy: float = 0.0
    virial: float = 0.0
    stats: PairTraversalStats = field(default_factory=PairTraversalStats)

    @classmethod
    def zeros(cls, n_owned: int) -> "PairSums":
        return cls(np.zeros((n_owned, 3)), np.zeros((n_owned, 3)))


# -----------------------------------------------------------------------------------
# Grid
# -----------------------------------------------------------------------------------

def grid_dims(box: Sequence[float], rc: float) -> np.ndarray:
    """Cells per axis, floor(box / rc); every axis needs at least two cells."""
    box = np.asarray(box, dtype=float)
    if not rc > 0.0:
        raise ConfigurationError(f"cutoff must be positive, got {rc}")
    dims = np.floor(box / rc).astype(np.int64)
    if np.any(dims < 2):
        raise ConfigurationError(f"box {tuple(box)} is too small for cutoff {rc}: need at least 2*rc per axis")
    return dims


@dataclass
class _Level:
    dims: np.ndarray
    coords: np.ndarray
    cell: np.ndarray
    order: np.ndarray
    start: np.ndarray
    count: np.ndarray
    owned_cell: np.ndarray
    refined_cell: np.ndarray

    @classmethod
    def build(cls, ext_coords: np.ndarray, dims: np.ndarray, ring: int, refined_cell: np.ndarray) -> "_Level":
        n_cells = int(np.prod(dims))
        cell = (ext_coords[:, 0] * dims[1] + ext_coords[:, 1]) * dims[2] + ext_coords[:, 2]
        order = np.argsort(cell, kind="stable")
        count = np.bincount(cell, minlength=n_cells)
        start = np.cumsum(count) - count
        coords = np.indices(tuple(dims)).reshape(3, -1)
        owned_cell = np.all((coords >= ring) & (coords < (dims - ring)[:, None]), axis=0)
        return cls(dims, coords, cell, order, start, count, owned_cell, refined_cell)


@dataclass
class CellGrid:
    """
    Linked cells for one box of the global grid plus its halo ring.

    **Fields:**
    - `box`: global box edge lengths.
    - `rc`: cutoff radius.
    - `global_dims`: cells per axis of the whole periodic grid.
    - `lo`, `hi`: inclusive global cell range owned by this grid.
    - `cell_edge`: edge length per axis (>= rc).
    - `r`, `ids`, `species`, `q`: combined arrays, owned molecules first, halo copies after.
    - `sub`: global subcell coordinates (integers, image-shifted for halo copies).
    - `n_owned`: number of owned molecules.
    - `halo_source`: for every halo copy, the index of its owned original in this grid or -1.
    - `adaptive`, `threshold`: subcell refinement settings.
    """

    box: np.ndarray
    rc: float
    global_dims: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    cell_edge: np.ndarray
    adaptive: bool = False
    threshold: int = DEFAULT_THRESHOLD
    r: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    species: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    q: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    sub: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    n_owned: int = 0
    halo_source: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    refined: Optional[np.ndarray] = None

    @classmethod
    def for_region(cls, box: Sequence[float], rc: float, lo=None, hi=None, adaptive: bool = False,
                   threshold: int = DEFAULT_THRESHOLD) -> "CellGrid":
        box = np.asarray(box, dtype=float)
        dims = grid_dims(box, rc)
        lo = np.zeros(3, dtype=np.int64) if lo is None else np.asarray(lo, dtype=np.int64)
        hi = dims - 1 if hi is None else np.asarray(hi, dtype=np.int64)
        return cls(box=box, rc=rc, global_dims=dims, lo=lo, hi=hi, cell_edge=box / dims,
                   adaptive=adaptive, threshold=threshold)

    # -- geometry --------------------------------------------------------------

    @property
    def dims(self) -> np.ndarray:
        return self.hi - self.lo + 1

    @property
    def ext_dims(self) -> np.ndarray:
        return self.dims + 2

    @property
    def n_halo(self) -> int:
        return int(self.ids.shape[0]) - self.n_owned

    def subcell_index(self, r: np.ndarray) -> np.ndarray:
        """Global subcell coordinates of wrapped positions."""
        half = self.cell_edge / 2.0
        sub = np.floor(r / half).astype(np.int64)
        return np.clip(sub, 0, 2 * self.global_dims - 1)

    def full_cell_index(self, r: np.ndarray) -> np.ndarray:
        return self.subcell_index(r) // 2

    # -- population ----------------------------------------------------------

    def populate(self, owned: MoleculeBlock, halo: Optional["HaloLayer"] = None) -> "CellGrid":
        """Bins owned molecules (wrapped positions) and appends the halo layer."""
        halo = halo if halo is not None else HaloLayer.empty()
        owned_sub = self.subcell_index(owned.r)
        self.r = np.concatenate([owned.r, halo.r]) if len(halo) else owned.r.copy()
        self.ids = np.concatenate([owned.ids, halo.ids])
        self.species = np.concatenate([owned.species, halo.species])
        self.q = np.concatenate([owned.q, halo.q]) if len(halo) else owned.q.copy()
        self.sub = np.concatenate([owned_sub, halo.sub]) if len(halo) else owned_sub
        self.n_owned = len(owned)
        self.halo_source = halo.source.copy()
        self._levels = None
        self.refined = np.zeros(int(np.prod(self.ext_dims)), dtype=bool)
        if self.adaptive:
            refine_cells(self, self.threshold)
        return self

    def _ext_sub(self) -> np.ndarray:
        return self.sub - 2 * (self.lo - 1)

    def _full_level(self) -> _Level:
        return _Level.build(self._ext_sub() // 2, self.ext_dims, 1, self.refined)

    def _sub_level(self, full: _Level) -> _Level:
        sub_dims = 2 * self.ext_dims
        coords = np.indices(tuple(sub_dims)).reshape(3, -1) // 2
        parent = (coords[0] * self.ext_dims[1] + coords[1]) * self.ext_dims[2] + coords[2]
        return _Level.build(self._ext_sub(), sub_dims, 2, self.refined[parent])

    def occupancy(self) -> np.ndarray:
        """Owned molecules per owned cell, shaped `dims`."""
        cells = self.sub[: self.n_owned] // 2 - self.lo
        flat = (cells[:, 0] * self.dims[1] + cells[:, 1]) * self.dims[2] + cells[:, 2]
        return np.bincount(flat, minlength=int(np.prod(self.dims))).reshape(tuple(self.dims))

    def cell_members(self, cell: Sequence[int]) -> np.ndarray:
        """Ids of the owned molecules in owned cell `cell` (coordinates relative to `lo`)."""
        cells = self.sub[: self.n_owned] // 2 - self.lo
        mask = np.all(cells == np.asarray(cell), axis=1)
        return self.ids[: self.n_owned][mask]

    @property
    def cells(self) -> List[np.ndarray]:
        """Per owned cell (C order over `dims`) the ids of its molecules."""
        return [self.cell_members(c) for c in itertools.product(*(range(d) for d in self.dims))]

    @property
    def subdivided(self) -> np.ndarray:
        """Refinement flags of the owned cells, shaped `dims`."""
        flags = self.refined.reshape(tuple(self.ext_dims))
        return flags[1:-1, 1:-1, 1:-1].copy()

    def subcell_members(self, cell: Sequence[int]) -> List[np.ndarray]:
        """The eight subcell id lists of an owned cell (empty lists if the cell is not refined)."""
        cell = np.asarray(cell)
        sub = self.sub[: self.n_owned]
        in_cell = np.all(sub // 2 - self.lo == cell, axis=1)
        local = sub[in_cell] - 2 * (cell + self.lo)
        ids = self.ids[: self.n_owned][in_cell]
        return [ids[np.all(local == np.asarray(o), axis=1)] for o in itertools.product((0, 1), repeat=3)]


def build_grid(box: Sequence[float], rc: float, positions, adaptive: bool = False,
               threshold: int = DEFAULT_THRESHOLD, ids=None) -> CellGrid:
    """
    Builds a single-domain grid over the whole box and bins `positions`.

    **Parameters:**
    - `box`: edge lengths, each >= 2*rc.
    - `rc`: cutoff radius.
    - `positions`: (N, 3) positions inside [0, box).
    - `adaptive`, `threshold`: subcell refinement settings.
    - `ids`: molecule ids (defaults to 0..N-1).

    **Raises:**
    - `ConfigurationError`: if the box is smaller than 2*rc along any axis.

    **Example:**
    >>> g = build_grid((10, 10, 10), 2.5, np.zeros((0, 3)))
    >>> tuple(int(d) for d in g.dims)
    (4, 4, 4)
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    grid = CellGrid.for_region(box, rc, adaptive=adaptive, threshold=threshold)
    n = positions.shape[0]
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    owned = MoleculeBlock(ids=ids, species=np.zeros(n, dtype=np.int64), r=positions,
                          v=np.zeros((n, 3)), q=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), j=np.zeros((n, 3)))
    return grid.populate(owned)


def refine_cells(grid: CellGrid, threshold: int) -> CellGrid:
    """
    Flags every cell (owned or halo) holding more than `threshold` molecules for
    2x2x2 subdivision. Cells at or below the threshold keep full-cell traversal.
    """
    ext = (grid.sub // 2) - (grid.lo - 1)
    dims = grid.ext_dims
    flat = (ext[:, 0] * dims[1] + ext[:, 1]) * dims[2] + ext[:, 2]
    counts = np.bincount(flat, minlength=int(np.prod(dims)))
    grid.threshold = threshold
    grid.refined = counts > threshold
    grid._levels = None
    if np.any(grid.refined):
        logger.debug("refined %d of %d cells (threshold %d)",
                     int(grid.refined.sum()), grid.refined.size, threshold)
    return grid


# -----------------------------------------------------------------------------------
# Pair enumeration
# -----------------------------------------------------------------------------------

_EMPTY = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


def pair_candidates(level: _Level, offset: Tuple[int, int, int],
                    cell_filter: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None):
    """
    All molecule pairs between every cell c and its neighbour c + offset, with at
    least one of the two cells owned. For offset (0, 0, 0) only pairs inside a cell
    with a < b are produced.
    """
    dims = level.dims
    occupied = np.nonzero(level.count)[0]
    if occupied.size == 0:
        return _EMPTY
    cx, cy, cz = level.coords[:, occupied]
    nx, ny, nz = cx + offset[0], cy + offset[1], cz + offset[2]
    inside = (nx >= 0) & (nx < dims[0]) & (ny >= 0) & (ny < dims[1]) & (nz >= 0) & (nz < dims[2])
    c = occupied[inside]
    d = (nx[inside] * dims[1] + ny[inside]) * dims[2] + nz[inside]
    keep = (level.count[d] > 0) & (level.owned_cell[c] | level.owned_cell[d])
    if cell_filter is not None:
        keep &= cell_filter(c, d)
    c, d = c[keep], d[keep]
    na, nb = level.count[c], level.count[d]
    total = na * nb
    n = int(total.sum())
    if n == 0:
        return _EMPTY
    rep = np.repeat(np.arange(c.size), total)
    first = np.cumsum(total) - total
    local = np.arange(n) - first[rep]
    nb_rep = nb[rep]
    a = local // nb_rep
    b = local - a * nb_rep
    i = level.order[level.start[c][rep] + a]
    j = level.order[level.start[d][rep] + b]
    if offset == (0, 0, 0):
        upper = a < b
        i, j = i[upper], j[upper]
    return i, j


def _traversal_plan(grid: CellGrid):
    full = grid._full_level()
    if not grid.adaptive or not np.any(grid.refined):
        return [(full, FULL_STENCIL, None)]
    sub = grid._sub_level(full)
    refined = grid.refined
    plan = [(full, FULL_STENCIL, lambda c, d: ~refined[c] & ~refined[d])]
    plan.append((sub, SUB_STENCIL, lambda c, d: sub.refined_cell[c] | sub.refined_cell[d]))
    return plan


def _target(grid: CellGrid, index: np.ndarray) -> np.ndarray:
    """Owned index acted on by a combined index, -1 for another worker's molecule."""
    target = index.copy()
    halo = index >= grid.n_owned
    target[halo] = grid.halo_source[index[halo] - grid.n_owned]
    return target


def _drop_duplicate_images(grid: CellGrid, i: np.ndarray, j: np.ndarray):
    low, high = np.minimum(i, j), np.maximum(i, j)
    mixed = high >= grid.n_owned
    if not np.any(mixed):
        return i, j
    source = np.full(i.shape[0], -1, dtype=np.int64)
    source[mixed] = grid.halo_source[high[mixed] - grid.n_owned]
    duplicate = (source >= 0) & (grid.ids[low] >= grid.ids[high])
    return i[~duplicate], j[~duplicate]


def _accumulate(grid: CellGrid, sums: PairSums, i: np.ndarray, j: np.ndarray, result) -> None:
    ti, tj = _target(grid, i), _target(grid, j)
    weight = np.where((ti >= 0) & (tj >= 0), 1.0, 0.5)
    sums.energy += float(np.sum(weight * result.u))
    sums.virial += float(np.sum(weight * result.virial))
    n = grid.n_owned
    vi, vj = ti >= 0, tj >= 0
    for k in range(3):
        sums.forces[:, k] += np.bincount(ti[vi], weights=result.f[vi, k], minlength=n)
        sums.forces[:, k] -= np.bincount(tj[vj], weights=result.f[vj, k], minlength=n)
        sums.torques[:, k] += np.bincount(ti[vi], weights=result.tau_i[vi, k], minlength=n)
        sums.torques[:, k] += np.bincount(tj[vj], weights=result.tau_j[vj, k], minlength=n)


def for_each_pair(grid: CellGrid, kernel: Callable[[PairBatch], object]) -> PairSums:
    """
    Visits every pair within the cutoff once and accumulates the kernel results.

    **Parameters:**
    - `grid`: a populated grid (halo current).
    - `kernel`: called with a `PairBatch` per stencil offset; returns an object with
      `f`, `tau_i`, `tau_j`, `u`, `virial` arrays (see `app.potentials.BatchResult`)
      or None to only observe the pairs.

    **Returns:**
    - `PairSums` with forces/torques on owned molecules, energy, virial and
      `PairTraversalStats`.
    """
    sums = PairSums.zeros(grid.n_owned)
    rc2 = grid.rc * grid.rc
    for level, offsets, cell_filter in _traversal_plan(grid):
        for offset in offsets:
            i, j = pair_candidates(level, offset, cell_filter)
            if i.size == 0:
                continue
            i, j = _drop_duplicate_images(grid, i, j)
            dr = grid.r[i] - grid.r[j]
            d2 = np.einsum("ij,ij->i", dr, dr)
            within = d2 < rc2
            sums.stats.distances_computed += int(i.size)
            sums.stats.pairs_within_cutoff += int(np.count_nonzero(within))
            if not np.any(within):
                continue
            batch = PairBatch(grid, i[within], j[within], dr[within])
            result = kernel(batch)
            if result is not None:
                _accumulate(grid, sums, batch.i, batch.j, result)
    return sums


# -----------------------------------------------------------------------------------
# Periodic boundaries and halos
# -----------------------------------------------------------------------------------

@dataclass
class HaloLayer:
    """Read-only copies: positions, orientations and integer subcell coordinates."""

    ids: np.ndarray
    species: np.ndarray
    r: np.ndarray
    q: np.ndarray
    sub: np.ndarray
    source: np.ndarray

    @classmethod
    def empty(cls) -> "HaloLayer":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 3)),
                   np.zeros((0, 4)), np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @staticmethod
    def concatenate(layers: Sequence["HaloLayer"]) -> "HaloLayer":
        layers = [layer for layer in layers if len(layer)]
        if not layers:
            return HaloLayer.empty()
        return HaloLayer(*(np.concatenate([getattr(layer, name) for layer in layers])
                           for name in ("ids", "species", "r", "q", "sub", "source")))


IMAGE_SHIFTS = list(itertools.product((-1, 0, 1), repeat=3))


def periodic_images(block: MoleculeBlock, sub: np.ndarray, global_dims: np.ndarray, box: np.ndarray,
                    lo: np.ndarray, hi: np.ndarray, local: bool) -> HaloLayer:
    """
    Copies of the molecules in `block` that fall into the halo ring of the cell box
    [lo, hi], shifted by whole periods where needed.

    **Parameters:**
    - `block`: molecules owned by the sender, wrapped into [0, box).
    - `sub`: their global subcell coordinates.
    - `local`: True when the receiver owns `block` itself; the copies then record the
      index of their original in `source`, otherwise `source` is -1.
    """
    if len(block) == 0:
        return HaloLayer.empty()
    cells = sub // 2
    layers = []
    for shift in IMAGE_SHIFTS:
        k = np.asarray(shift, dtype=np.int64)
        moved = cells + k * global_dims
        in_ring = np.all((moved >= lo - 1) & (moved <= hi + 1), axis=1)
        if not np.any(k):
            in_ring &= ~np.all((moved >= lo) & (moved <= hi), axis=1)
        index = np.nonzero(in_ring)[0]
        if index.size == 0:
            continue
        layers.append(HaloLayer(
            ids=block.ids[index].copy(),
            species=block.species[index].copy(),
            r=block.r[index] + k * box,
            q=block.q[index].copy(),
            sub=sub[index] + 2 * k * global_dims,
            source=index.astype(np.int64) if local else np.full(index.size, -1, dtype=np.int64),
        ))
    return HaloLayer.concatenate(layers)


def wrap_positions(r: np.ndarray, box: np.ndarray, cell_edge: np.ndarray) -> np.ndarray:
    """
    Maps positions back into [0, box).

    Only excursions past one cell outside the box are caught here. Larger jumps that
    stay inside the box are `Integrator.drift`'s job: it rejects any displacement
    above one cell edge per step, so both checks must stay in place together.

    **Raises:**
    - `InstabilityError`: if a position lies more than one cell width outside the box.
    """
    if r.size and (np.any(r < -cell_edge) or np.any(r >= box + cell_edge) or not np.all(np.isfinite(r))):
        raise InstabilityError("a molecule moved more than one cell width in one step; reduce the time step")
    wrapped = r - box * np.floor(r / box)
    # r slightly below 0 can round to exactly box
    return np.where(wrapped >= box, 0.0, wrapped)


def wrap_and_halo(grid: CellGrid, box: Sequence[float], states: MoleculeBlock) -> CellGrid:
    """
    Wraps the owned molecules of a single-domain grid into the box (in place on
    `states`) and rebuilds the grid with a halo of periodic images.

    **Example:**
    >>> block = MoleculeBlock.from_states([])
    >>> g = wrap_and_halo(build_grid((10, 10, 10), 2.5, np.zeros((0, 3))), (10, 10, 10), block)
    >>> g.n_halo
    0
    """
    box = np.asarray(box, dtype=float)
    states.r = wrap_positions(states.r, box, grid.cell_edge)
    fresh = CellGrid(box=box, rc=grid.rc, global_dims=grid.global_dims, lo=grid.lo, hi=grid.hi,
                     cell_edge=grid.cell_edge, adaptive=grid.adaptive, threshold=grid.threshold)
    sub = fresh.subcell_index(states.r)
    halo = periodic_images(states, sub, fresh.global_dims, box, fresh.lo, fresh.hi, local=True)
    return fresh.populate(states, halo)


# -----------------------------------------------------------------------------------
# Reference enumeration
# -----------------------------------------------------------------------------------

def minimum_image(dr: np.ndarray, box: np.ndarray) -> np.ndarray:
    return dr - box * np.round(dr / box)


def brute_force_pairs(r: np.ndarray, box: Sequence[float], rc: float):
    """
    All pairs (i < j) within rc under the minimum-image convention, O(N^2).

    **Returns:**
    - `(i, j, dr)` with `dr` the minimum-image separation r_i - r_j.
    """
    box = np.asarray(box, dtype=float)
    n = r.shape[0]
    i, j = np.triu_indices(n, k=1)
    dr = minimum_image(r[i] - r[j], box)
    within = np.einsum("ij,ij->i", dr, dr) < rc * rc
    return i[within], j[within], dr[within]
