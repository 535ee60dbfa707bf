"""Array-backed octree with squeezed cell boxes."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..space import MAX_LEVEL, Box3, CurveKind, Particles, SfcKey
from . import expansions as ex


@dataclass(frozen=True)
class TraversalConfig:
    theta: float = 0.4
    n_leaf: int = 64
    p: int = 4

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if self.n_leaf < 1:
            raise ValueError("n_leaf must be >= 1")
        if self.p < 1:
            raise ValueError("expansion order p must be >= 1")


@dataclass(frozen=True)
class Cell:
    """Read-only view of one tree cell."""

    index: int
    key: SfcKey
    box: Box3
    center: np.ndarray
    radius: float
    start: int
    count: int
    children: tuple[int, ...]
    M: np.ndarray

    @property
    def is_leaf(self) -> bool:
        return not self.children


class Tree:
    """Octree cells stored column-wise; children of a cell are contiguous.

    Cells with no children and ``payload`` False carry a multipole only; they
    occur in trees rebuilt from essential-tree messages.
    """

    def __init__(self, pos, q, ids, center, radius, lo, hi, start, count,
                 child_start, nchild, parent, level, key, payload, M, p,
                 origin=0, perm=None):
        self.pos = pos
        self.q = q
        self.ids = ids
        self.center = center
        self.radius = radius
        self.lo = lo
        self.hi = hi
        self.start = start
        self.count = count
        self.child_start = child_start
        self.nchild = nchild
        self.parent = parent
        self.level = level
        self.key = key
        self.payload = payload
        self.M = M
        self.p = p
        self.origin = origin
        self.perm = perm

    @property
    def ncells(self) -> int:
        return len(self.radius)

    @property
    def nparticles(self) -> int:
        return len(self.q)

    @property
    def bounds(self) -> Box3:
        return Box3(self.lo[0], self.hi[0])

    def is_leaf(self, i: int) -> bool:
        return self.nchild[i] == 0

    def children(self, i: int) -> range:
        s = self.child_start[i]
        return range(s, s + self.nchild[i])

    def cell(self, i: int) -> Cell:
        return Cell(i, SfcKey(int(self.key[i]), int(self.level[i]), CurveKind.MORTON),
                    Box3(self.lo[i], self.hi[i]), self.center[i], float(self.radius[i]),
                    int(self.start[i]), int(self.count[i]), tuple(self.children(i)), self.M[i])

    @cached_property
    def preorder(self) -> np.ndarray:
        """Cell indices in depth-first preorder (parents before children)."""
        out = []
        stack = [0]
        while stack:
            i = stack.pop()
            out.append(i)
            s, n = self.child_start[i], self.nchild[i]
            stack.extend(range(s + n - 1, s - 1, -1))
        return np.array(out, dtype=np.int64)

    @cached_property
    def leaf_radius(self) -> float:
        """Largest radius among leaves; bounds target cells that can never be split."""
        leaves = self.nchild == 0
        return float(self.radius[leaves].max())

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.nchild == 0)


def build_tree(particles: Particles, bounds: Box3, cfg: TraversalConfig, origin: int = 0) -> Tree:
    """Octree by recursive octant split of the bounding cube of ``bounds``.

    Stops at ``cfg.n_leaf`` particles per cell or at level 21; stored boxes are
    then squeezed to the particles of each cell.
    """
    n = len(particles)
    if n == 0:
        raise ValueError("cannot build a tree with no particles")
    if not np.all(bounds.contains(particles.pos)):
        raise ValueError("bounds do not contain all particles")
    pos_in = particles.pos
    cube = bounds.bounding_cube()
    order = np.arange(n)

    gcenter = [cube.center]
    ghalf = [0.5 * float(cube.extent.max())]
    start, count, parent, level, key = [0], [n], [-1], [0], [0]
    child_start, nchild = [0], [0]

    i = 0
    while i < len(start):
        s, c = start[i], count[i]
        if c > cfg.n_leaf and level[i] < MAX_LEVEL:
            idx = order[s:s + c]
            p = pos_in[idx]
            if np.ptp(p, axis=0).max() > 0.0:
                gc = gcenter[i]
                octant = ((p[:, 0] >= gc[0]).astype(np.int64)
                          | ((p[:, 1] >= gc[1]).astype(np.int64) << 1)
                          | ((p[:, 2] >= gc[2]).astype(np.int64) << 2))
                srt = np.argsort(octant, kind="stable")
                order[s:s + c] = idx[srt]
                bins = np.bincount(octant, minlength=8)
                child_start[i] = len(start)
                offset = s
                for o in range(8):
                    if bins[o] == 0:
                        continue
                    h = 0.5 * ghalf[i]
                    sign = np.array([1 if o & 1 else -1, 1 if o & 2 else -1, 1 if o & 4 else -1])
                    gcenter.append(gcenter[i] + h * sign)
                    ghalf.append(h)
                    start.append(offset)
                    count.append(int(bins[o]))
                    parent.append(i)
                    level.append(level[i] + 1)
                    key.append((key[i] << 3) | o)
                    child_start.append(0)
                    nchild.append(0)
                    nchild[i] += 1
                    offset += int(bins[o])
        i += 1

    start = np.array(start, dtype=np.int64)
    count = np.array(count, dtype=np.int64)
    pos = pos_in[order]
    # squeeze: tight box of each cell's contiguous particle range
    lo = _range_reduce(pos, start, count, np.min)
    hi = _range_reduce(pos, start, count, np.max)
    center = 0.5 * (lo + hi)
    radius = 0.5 * np.linalg.norm(hi - lo, axis=1)
    nc = len(start)
    return Tree(
        pos=pos, q=particles.q[order].copy(), ids=particles.ids[order].copy(),
        center=center, radius=radius, lo=lo, hi=hi, start=start, count=count,
        child_start=np.array(child_start, dtype=np.int64), nchild=np.array(nchild, dtype=np.int64),
        parent=np.array(parent, dtype=np.int64), level=np.array(level, dtype=np.int64),
        key=np.array(key, dtype=np.uint64), payload=np.array(nchild) == 0,
        M=np.zeros((nc, ex.n_terms(cfg.p))), p=cfg.p, origin=origin, perm=order,
    )


def _range_reduce(pos, start, count, fn):
    out = np.empty((len(start), 3))
    for i, (s, c) in enumerate(zip(start, count)):
        out[i] = fn(pos[s:s + c], axis=0)
    return out


def upward_pass(tree: Tree, cfg: TraversalConfig | None = None) -> Tree:
    """P2M on leaves, then M2M level by level from the deepest level up."""
    p = tree.p if cfg is None else cfg.p
    if p != tree.p:
        raise ValueError("expansion order differs from the tree's allocation")
    tab = ex.tables(p)
    leaves = tree.leaves()
    leaf_of = np.repeat(leaves, tree.count[leaves])
    seg = np.concatenate([np.arange(tree.start[c], tree.start[c] + tree.count[c]) for c in leaves])
    mono = ex.monomials(tree.pos[seg] - tree.center[leaf_of], p)
    weighted = tree.q[seg, None] * mono / tab.fact
    bounds = np.concatenate([[0], np.cumsum(tree.count[leaves])[:-1]])
    M = np.zeros_like(tree.M)
    M[leaves] = np.add.reduceat(weighted, bounds, axis=0)

    for lev in range(int(tree.level.max()), 0, -1):
        cells = np.flatnonzero(tree.level == lev)
        par = tree.parent[cells]
        shifted = ex.m2m(M[cells], tree.center[cells] - tree.center[par], p)
        np.add.at(M, par, shifted)
    tree.M = M
    return tree
