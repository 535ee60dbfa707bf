"""Particle partitioning across simulated ranks: HOT, ORB and hybrid ORB."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .space import MAX_LEVEL, Box3, CurveKind, Particles, cell_indices, encode_keys

HIST_BINS = 512
HIST_MAX_ITER = 32


class SchemeKind(enum.Enum):
    HOT_MORTON = "hot-morton"
    HOT_HILBERT = "hot-hilbert"
    ORB_GLOBAL = "orb-global"
    HYBRID_ORB = "hybrid-orb"

    @property
    def is_orb(self) -> bool:
        return self in (SchemeKind.ORB_GLOBAL, SchemeKind.HYBRID_ORB)


@dataclass(frozen=True)
class PartitionScheme:
    kind: SchemeKind
    ranks: int

    def __post_init__(self):
        if self.ranks < 1:
            raise ValueError("ranks must be >= 1")


@dataclass
class Partition:
    """One rank's share of the particles.

    ``bounds`` is tight over the owned particles. ``domain`` is the region the
    scheme assigned to the rank (the ORB cell, or the hull of the owned key
    cells for HOT), used for adjacency. ``tree_bounds`` is the box the rank's local octree is built on.
    """

    rank: int
    bounds: Box3
    particles: Particles
    domain: Box3
    tree_bounds: Box3

    @property
    def count(self) -> int:
        return len(self.particles)


@dataclass
class HistogramState:
    edges: np.ndarray
    counts: np.ndarray
    target: int


@dataclass
class SplitterResult:
    value: float | int
    below: int
    imbalance: int
    iterations: int
    converged: bool
    history: list[HistogramState] = field(default_factory=list, repr=False)


def _allreduce(per_rank: Sequence[np.ndarray]) -> np.ndarray:
    total = np.zeros_like(per_rank[0])
    for c in per_rank:
        total = total + c
    return total


def find_splitter(values: Sequence[np.ndarray] | np.ndarray, target: int, tol: int = 0,
                  bins: int = HIST_BINS, max_iter: int = HIST_MAX_ITER) -> SplitterResult:
    """Histogram search for ``s`` with ``#{v < s}`` within ``tol`` of ``target``.

    ``values`` is one array per simulated rank. Every iteration each rank counts
    its values below the current bin edges; only the summed counts are shared.
    When duplicates make the target unreachable, the closest edge found is
    returned with ``converged=False`` and the residual ``imbalance``.
    """
    if isinstance(values, np.ndarray):
        values = [values]
    local = [np.sort(np.asarray(v).ravel()) for v in values]
    nonempty = [v for v in local if len(v)]
    total = sum(len(v) for v in local)
    if not 0 <= target <= total:
        raise ValueError(f"target {target} outside 0..{total}")
    if tol < 0:
        raise ValueError("tol must be >= 0")
    if total == 0:
        return SplitterResult(0, 0, 0, 0, True)
    integer = np.issubdtype(nonempty[0].dtype, np.integer)
    lo = min(v[0] for v in nonempty)
    hi = max(v[-1] for v in nonempty)
    if integer:
        lo, hi = int(lo), int(hi) + 1
    else:
        lo, hi = float(lo), float(np.nextafter(hi, np.inf))

    best_val, best_below = lo, 0
    history = []
    for it in range(1, max_iter + 1):
        if integer:
            width = hi - lo
            edges = np.unique(np.array([lo + (width * k) // bins for k in range(bins + 1)], dtype=object))
            edges = edges.astype(local[0].dtype if local[0].dtype.kind == "u" else np.int64)
        else:
            edges = np.unique(np.linspace(lo, hi, bins + 1))
        counts = _allreduce([np.searchsorted(v, edges, side="left") for v in local])
        history.append(HistogramState(edges, counts, target))
        err = np.abs(counts - target)
        k = int(np.argmin(err))
        if err[k] < abs(best_below - target) or it == 1:
            best_val, best_below = edges[k], int(counts[k])
        if err[k] <= tol:
            return SplitterResult(_scalar(edges[k]), int(counts[k]), int(err[k]), it, True, history)
        # narrow to the bracket [edges[j], edges[j+1]] that straddles the target
        j = int(np.searchsorted(counts, target, side="left")) - 1
        j = min(max(j, 0), len(edges) - 2)
        new_lo, new_hi = edges[j], edges[j + 1]
        if integer:
            if int(new_hi) - int(new_lo) <= 1:
                break
            lo, hi = int(new_lo), int(new_hi)
        else:
            if not new_lo < new_hi or np.nextafter(new_lo, np.inf) >= new_hi:
                break
            lo, hi = float(new_lo), float(new_hi)
    return SplitterResult(_scalar(best_val), best_below, abs(best_below - target), len(history), False, history)


def _scalar(v):
    return v.item() if hasattr(v, "item") else v


def default_tol(n: int, ranks: int) -> int:
    return max(1, n // (1000 * ranks))


def hot_level(n: int, n_leaf: int) -> int:
    """Key sampling level: ceil(log8(N / N_leaf)) + 2, clamped to [1, 21]."""
    ratio = max(n / n_leaf, 1.0)
    return int(min(MAX_LEVEL, max(1, math.ceil(math.log(ratio, 8) - 1e-12) + 2)))


def _initial_owner(n: int, ranks: int) -> np.ndarray:
    """Block distribution of the input order, standing in for the pre-partition layout."""
    return (np.arange(n) * ranks) // n


def _split_by_owner(values: np.ndarray, owner: np.ndarray, ranks: int) -> list[np.ndarray]:
    return [values[owner == r] for r in range(ranks)]


def partition(particles: Particles, scheme: PartitionScheme, n_leaf: int = 64,
              trace: list | None = None) -> list[Partition]:
    """Split particles into ``scheme.ranks`` partitions.

    ``trace``, when given, receives one record per ORB split with the node's
    extents and the chosen axis.
    """
    n, ranks = len(particles), scheme.ranks
    if n < ranks:
        raise ValueError(f"need at least one particle per rank (N={n}, P={ranks})")
    gbox = Box3.around(particles.pos)
    if scheme.kind.is_orb:
        owner, domains = _orb(particles.pos, ranks, gbox, trace)
    else:
        kind = CurveKind.MORTON if scheme.kind is SchemeKind.HOT_MORTON else CurveKind.HILBERT
        owner, domains = _hot(particles.pos, ranks, gbox, kind, n_leaf)

    parts = []
    root_cube = gbox.bounding_cube()
    for r in range(ranks):
        idx = np.flatnonzero(owner == r)
        if len(idx) == 0:
            raise ValueError(f"rank {r} received no particles under {scheme.kind.value}")
        sub = particles.subset(idx)
        tight = Box3.around(sub.pos)
        domain = domains[r]
        tree_bounds = tight if scheme.kind is SchemeKind.HYBRID_ORB else root_cube
        parts.append(Partition(r, tight, sub, domain, tree_bounds))
    return parts


def _hot(pos, ranks, gbox, kind, n_leaf):
    n = len(pos)
    level = hot_level(n, n_leaf)
    cube = gbox.bounding_cube()
    ijk = cell_indices(pos, cube, level)
    keys = encode_keys(ijk, level, kind)
    init = _initial_owner(n, ranks)
    per_rank = _split_by_owner(keys, init, ranks)
    tol = default_tol(n, ranks)
    splitters = [find_splitter(per_rank, (r * n) // ranks, tol).value for r in range(1, ranks)]
    owner = np.searchsorted(np.array(splitters, dtype=np.uint64), keys, side="right")
    # domain: bounding box of the sampling-level cells the rank owns; these cells tile the cube
    side = float(cube.extent.max()) / (1 << level)
    domains = []
    for r in range(ranks):
        mine = ijk[owner == r]
        if len(mine) == 0:
            domains.append(None)
            continue
        domains.append(Box3(cube.lo + side * mine.min(axis=0), cube.lo + side * (mine.max(axis=0) + 1)))
    return owner, domains


def _orb(pos, ranks, gbox, trace):
    n = len(pos)
    quota = np.full(ranks, n // ranks)
    quota[: n % ranks] += 1
    owner = np.empty(n, dtype=np.int64)
    domains: list[Box3 | None] = [None] * ranks
    init = _initial_owner(n, ranks)
    tol = default_tol(n, ranks)

    def recurse(idx, rank_lo, rank_hi, region: Box3, depth):
        nr = rank_hi - rank_lo
        if nr == 1:
            owner[idx] = rank_lo
            domains[rank_lo] = region
            return
        left_ranks = nr // 2
        target = int(quota[rank_lo:rank_lo + left_ranks].sum())
        sub = pos[idx]
        extent = sub.max(axis=0) - sub.min(axis=0)
        axis = int(np.argmax(extent))
        if trace is not None:
            trace.append({"depth": depth, "extent": extent.copy(), "axis": axis, "n": len(idx)})
        coord = sub[:, axis]
        split = find_splitter(_split_by_owner(coord, init[idx], ranks), target, tol).value
        below = coord < split
        # exact balance: move the particles nearest the bisector across
        deficit = target - int(below.sum())
        if deficit:
            order = np.lexsort((idx, coord))
            below = np.zeros(len(idx), dtype=bool)
            below[order[:target]] = True
        left, right = idx[below], idx[~below]
        if len(left) and len(right):
            cut = 0.5 * (coord[below].max() + coord[~below].min())
        else:
            cut = split
        lo_hi = region.hi.copy()
        lo_hi[axis] = cut
        hi_lo = region.lo.copy()
        hi_lo[axis] = cut
        recurse(left, rank_lo, rank_lo + left_ranks, Box3(region.lo, lo_hi), depth + 1)
        recurse(right, rank_lo + left_ranks, rank_hi, Box3(hi_lo, region.hi), depth + 1)

    recurse(np.arange(n), 0, ranks, gbox, 0)
    return owner, domains


def partition_grid(particles: Particles, dims: tuple[int, int, int], box: Box3 | None = None) -> list[Partition]:
    """Uniform rank grid over ``box``; rank id is x-fastest. For controlled experiments."""
    box = box or Box3.around(particles.pos)
    dims = np.asarray(dims)
    frac = (particles.pos - box.lo) / np.where(box.extent > 0, box.extent, 1.0)
    cell = np.clip(np.floor(frac * dims).astype(np.int64), 0, dims - 1)
    owner = cell[:, 0] + dims[0] * (cell[:, 1] + dims[1] * cell[:, 2])
    step = box.extent / dims
    parts = []
    for r in range(int(np.prod(dims))):
        ijk = np.array([r % dims[0], (r // dims[0]) % dims[1], r // (dims[0] * dims[1])])
        domain = Box3(box.lo + ijk * step, box.lo + (ijk + 1) * step)
        idx = np.flatnonzero(owner == r)
        if len(idx) == 0:
            raise ValueError(f"grid cell {ijk.tolist()} holds no particles")
        sub = particles.subset(idx)
        tight = Box3.around(sub.pos)
        parts.append(Partition(r, tight, sub, domain, tight))
    return parts


def mean_spacing(pos: np.ndarray, sample: int = 2000, seed: int = 0) -> float:
    """Mean nearest-neighbour distance, estimated on a deterministic sample."""
    tree = cKDTree(pos)
    rng = np.random.default_rng(seed)
    pick = pos if len(pos) <= sample else pos[rng.choice(len(pos), sample, replace=False)]
    d, _ = tree.query(pick, k=2)
    return float(d[:, 1].mean())


def default_linking_length(pos: np.ndarray) -> float:
    return 4.0 * mean_spacing(pos)


def connectivity_components(part: Partition | np.ndarray, linking_length: float) -> int:
    """Connected components of the particle set under single linkage."""
    pos = part.particles.pos if isinstance(part, Partition) else np.asarray(part)
    if len(pos) == 0:
        raise ValueError("partition is empty")
    if linking_length <= 0:
        raise ValueError("linking length must be positive")
    pairs = cKDTree(pos).query_pairs(linking_length, output_type="ndarray")
    n = len(pos)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    ncomp, _ = connected_components(graph, directed=False)
    return int(ncomp)


def balance(parts: Sequence[Partition]) -> tuple[int, int]:
    counts = [p.count for p in parts]
    return min(counts), max(counts)
