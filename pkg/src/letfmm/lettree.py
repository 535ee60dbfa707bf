"""Essential-subtree extraction (sender side) and grafting (receiver side)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fmmcore import expansions as ex
from .fmmcore.tree import TraversalConfig, Tree
from .space import Box3, CurveKind, Particles, SfcKey

HEADER_BYTES = 4 + 8 + 1 + 1
GEOMETRY_BYTES = 10 * 8
PARTICLE_BYTES = 4 * 8
COUNT_BYTES = 4
# strict safety margin on the cut test so rounding never admits a borderline cell
CUT_MARGIN = 1e-12


def cell_nbytes(p: int, payload_count: int | None = None) -> int:
    """Wire size of one cell record."""
    n = HEADER_BYTES + GEOMETRY_BYTES + 8 * ex.n_terms(p)
    if payload_count is not None:
        n += COUNT_BYTES + PARTICLE_BYTES * payload_count
    return n


@dataclass(frozen=True, eq=False)
class LetCellMsg:
    origin: int
    key: SfcKey
    center: np.ndarray
    radius: float
    box: Box3
    M: np.ndarray
    is_leaf_payload: bool = False
    particles: Particles | None = field(default=None, repr=False)

    @property
    def p(self) -> int:
        # nterms = C(p+2, 3) is strictly increasing in p
        p = 1
        while ex.n_terms(p) < len(self.M):
            p += 1
        return p

    @property
    def nbytes(self) -> int:
        count = len(self.particles) if self.is_leaf_payload else None
        return cell_nbytes(self.p, count)

    @property
    def ident(self) -> tuple[int, int, int]:
        return (self.origin, self.key.level, self.key.key)


def total_bytes(msgs: Sequence[LetCellMsg]) -> int:
    return sum(m.nbytes for m in msgs)


def _cut_mask(center, radius, parent, remote_bounds: Box3, theta: float,
              target_leaf_radius: float | None) -> np.ndarray:
    """Cells whose multipole is acceptable to every target cell the receiver can pair them with.

    The receiver's target cells have centres inside ``remote_bounds`` and radii at
    most ``r_box``. A non-root cell is first paired with a target only after its
    parent was opened, which needs the target to be a leaf or no larger than the
    parent, so its effective target radius is min(r_box, max(r_parent, r_leaf)).
    Without ``target_leaf_radius`` the bound falls back to r_box.
    """
    r_box = remote_bounds.radius
    rho = np.full(len(radius), r_box)
    if target_leaf_radius is not None:
        has_parent = parent >= 0
        rp = radius[np.where(has_parent, parent, 0)]
        rho = np.where(has_parent, np.minimum(r_box, np.maximum(rp, target_leaf_radius)), r_box)
    dist = remote_bounds.distance_to(center)
    return (rho + radius) < theta * dist * (1.0 - CUT_MARGIN)


def extract_essential(tree: Tree, remote_bounds: Box3, cfg: TraversalConfig, origin: int | None = None,
                      target_leaf_radius: float | None = None) -> list[LetCellMsg]:
    """Cells of ``tree`` the owner of ``remote_bounds`` needs, parent before child.

    Cut cells travel as multipoles with their subtree pruned; leaves that stay
    near carry their particles; opened internal cells carry their multipole too.
    """
    origin = tree.origin if origin is None else origin
    cut = _cut_mask(tree.center, tree.radius, tree.parent, remote_bounds, cfg.theta, target_leaf_radius)
    out = []
    stack = [0]
    kind = CurveKind.MORTON
    while stack:
        i = stack.pop()
        leaf = tree.nchild[i] == 0
        payload = bool(leaf and not cut[i] and tree.payload[i])
        parts = None
        if payload:
            s, c = tree.start[i], tree.count[i]
            parts = Particles(tree.pos[s:s + c], tree.q[s:s + c], tree.ids[s:s + c])
        out.append(LetCellMsg(origin, SfcKey(int(tree.key[i]), int(tree.level[i]), kind),
                              tree.center[i], float(tree.radius[i]), Box3(tree.lo[i], tree.hi[i]),
                              tree.M[i], payload, parts))
        if not cut[i] and not leaf:
            s, n = tree.child_start[i], tree.nchild[i]
            stack.extend(range(s + n - 1, s - 1, -1))
    return out


def reduce_messages(msgs: Sequence[LetCellMsg], remote_bounds: Box3, cfg: TraversalConfig,
                    target_leaf_radius: float | None = None) -> list[LetCellMsg]:
    """Re-extract an already received cell list against another rank's bounds.

    Used by relays: the result never contains more than the input, and a cut
    cell keeps its multipole while its received descendants are dropped.
    """
    if not msgs:
        return []
    index = {(m.key.level, m.key.key): i for i, m in enumerate(msgs)}
    parent = np.array([index.get((m.key.level - 1, m.key.key >> 3), -1) if m.key.level else -1
                       for m in msgs], dtype=np.int64)
    center = np.array([m.center for m in msgs])
    radius = np.array([m.radius for m in msgs])
    cut = _cut_mask(center, radius, parent, remote_bounds, cfg.theta, target_leaf_radius)
    keep = np.ones(len(msgs), dtype=bool)
    out = []
    for i, m in enumerate(msgs):
        pi = parent[i]
        if pi >= 0 and (not keep[pi] or cut[pi]):
            keep[i] = False
            continue
        if cut[i] and m.is_leaf_payload:
            m = LetCellMsg(m.origin, m.key, m.center, m.radius, m.box, m.M, False, None)
        out.append(m)
    return out


class GraftError(RuntimeError):
    """Received cells do not form a tree (protocol bug)."""


@dataclass
class LocalEssentialTree:
    local: Tree | None
    remotes: dict[int, Tree]
    provenance: dict[tuple[int, int, int], int]

    def sources(self) -> list[Tree]:
        """Source forest: local tree first, then remote trees by origin rank."""
        out = [] if self.local is None else [self.local]
        return out + [self.remotes[o] for o in sorted(self.remotes)]

    @property
    def nremote_cells(self) -> int:
        return sum(t.ncells for t in self.remotes.values())


def rebuild_tree(msgs: Sequence[LetCellMsg], origin: int) -> Tree:
    """Array tree from one origin's cell records (any order, root included)."""
    if not msgs:
        raise GraftError(f"no cells from origin {origin}")
    order = sorted(range(len(msgs)), key=lambda i: (msgs[i].key.level, msgs[i].key.key))
    cells = [msgs[i] for i in order]
    pos_of: dict[tuple[int, int], int] = {}
    for i, m in enumerate(cells):
        k = (m.key.level, m.key.key)
        if k in pos_of:
            raise GraftError(f"duplicate cell from origin {origin}: level {k[0]} key {k[1]}")
        pos_of[k] = i
    if cells[0].key.level != 0 or len([c for c in cells if c.key.level == 0]) != 1:
        raise GraftError(f"origin {origin}: missing root cell")

    nc = len(cells)
    parent = np.full(nc, -1, dtype=np.int64)
    child_start = np.zeros(nc, dtype=np.int64)
    nchild = np.zeros(nc, dtype=np.int64)
    for i, m in enumerate(cells[1:], start=1):
        pk = (m.key.level - 1, m.key.key >> 3)
        pi = pos_of.get(pk)
        if pi is None:
            raise GraftError(f"orphan cell from origin {origin}: level {m.key.level} key {m.key.key}")
        parent[i] = pi
        if nchild[pi] == 0:
            child_start[pi] = i
        elif child_start[pi] + nchild[pi] != i:
            raise GraftError(f"origin {origin}: children of key {pk[1]} are not contiguous")
        nchild[pi] += 1
    for i, m in enumerate(cells):
        if nchild[i] and m.is_leaf_payload:
            raise GraftError(f"origin {origin}: payload cell {m.key.key} has children")

    start = np.zeros(nc, dtype=np.int64)
    count = np.zeros(nc, dtype=np.int64)
    pos, q, ids = [], [], []
    off = 0
    for i, m in enumerate(cells):
        if m.is_leaf_payload:
            start[i], count[i] = off, len(m.particles)
            off += len(m.particles)
            pos.append(m.particles.pos)
            q.append(m.particles.q)
            ids.append(m.particles.ids)
    M = np.array([m.M for m in cells])
    p = cells[0].p
    return Tree(
        pos=np.concatenate(pos) if pos else np.zeros((0, 3)),
        q=np.concatenate(q) if q else np.zeros(0),
        ids=np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64),
        center=np.array([m.center for m in cells]), radius=np.array([m.radius for m in cells]),
        lo=np.array([m.box.lo for m in cells]), hi=np.array([m.box.hi for m in cells]),
        start=start, count=count, child_start=child_start, nchild=nchild, parent=parent,
        level=np.array([m.key.level for m in cells], dtype=np.int64),
        key=np.array([m.key.key for m in cells], dtype=np.uint64),
        payload=np.array([m.is_leaf_payload for m in cells]), M=M, p=p, origin=origin,
    )


def graft(local: Tree | None, msgs_by_origin: Mapping[int, Sequence[LetCellMsg]]) -> LocalEssentialTree:
    """Attach each origin's received subtree next to the local tree."""
    remotes: dict[int, Tree] = {}
    provenance: dict[tuple[int, int, int], int] = {}
    for origin in sorted(msgs_by_origin):
        msgs = msgs_by_origin[origin]
        if not msgs:
            continue
        for m in msgs:
            if m.origin != origin:
                raise GraftError(f"cell {m.key.key} claims origin {m.origin}, filed under {origin}")
        t = rebuild_tree(msgs, origin)
        if local is not None and t.p != local.p:
            raise GraftError(f"origin {origin} sent order {t.p}, local order is {local.p}")
        remotes[origin] = t
        for lev, key in zip(t.level.tolist(), t.key.tolist()):
            provenance[(origin, lev, key)] = origin
    return LocalEssentialTree(local, remotes, provenance)
