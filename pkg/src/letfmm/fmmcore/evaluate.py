"""Dual-tree traversal, downward pass and the direct-summation oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..space import Particles
from . import expansions as ex
from .tree import TraversalConfig, Tree


class LetIncompleteError(RuntimeError):
    """A multipole-only source cell failed the acceptance test during traversal."""


@dataclass
class Interactions:
    """Cell pairs chosen by the traversal. Source cells are (tree index, cell)."""

    m2l_target: np.ndarray
    m2l_tree: np.ndarray
    m2l_source: np.ndarray
    p2p_target: np.ndarray
    p2p_tree: np.ndarray
    p2p_source: np.ndarray

    @property
    def n_m2l(self) -> int:
        return len(self.m2l_target)

    @property
    def n_p2p(self) -> int:
        return len(self.p2p_target)


@dataclass
class EvalResult:
    """Potentials (and optionally gradients) in the target tree's input order."""

    phi: np.ndarray
    grad: np.ndarray | None
    interactions: Interactions
    coincident: int = 0
    stats: dict = field(default_factory=dict)


def traverse(target: Tree, sources: Sequence[Tree], theta: float) -> Interactions:
    """Dual traversal of ``target`` against every tree of the source forest.

    A pair is far when (rA + rB) < theta * |cA - cB|. Otherwise the larger cell
    is split (the source one on ties); leaves can only be split on the other side.
    """
    tc = target.center.tolist()
    tr = target.radius.tolist()
    tcs = target.child_start.tolist()
    tn = target.nchild.tolist()
    mt, mk, ms, pt, pk, ps = [], [], [], [], [], []
    for k, src in enumerate(sources):
        sc = src.center.tolist()
        sr = src.radius.tolist()
        scs = src.child_start.tolist()
        sn = src.nchild.tolist()
        spay = src.payload.tolist()
        stack = [(0, 0)]
        while stack:
            a, b = stack.pop()
            ca, cb = tc[a], sc[b]
            dx, dy, dz = ca[0] - cb[0], ca[1] - cb[1], ca[2] - cb[2]
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            ra, rb = tr[a], sr[b]
            if ra + rb < theta * d:
                mt.append(a)
                mk.append(k)
                ms.append(b)
                continue
            leaf_a = tn[a] == 0
            leaf_b = sn[b] == 0
            if leaf_b and not spay[b]:
                raise LetIncompleteError(
                    f"source cell {b} of tree from rank {src.origin} has no particles "
                    f"but fails the acceptance test against target cell {a}")
            if leaf_a and leaf_b:
                pt.append(a)
                pk.append(k)
                ps.append(b)
            elif leaf_a or (not leaf_b and rb >= ra):
                s0 = scs[b]
                for c in range(s0 + sn[b] - 1, s0 - 1, -1):
                    stack.append((a, c))
            else:
                s0 = tcs[a]
                for c in range(s0 + tn[a] - 1, s0 - 1, -1):
                    stack.append((c, b))
    as_i = lambda v: np.array(v, dtype=np.int64)
    return Interactions(as_i(mt), as_i(mk), as_i(ms), as_i(pt), as_i(pk), as_i(ps))


class _Forest:
    """Source trees concatenated into flat arrays with per-tree offsets."""

    def __init__(self, sources: Sequence[Tree]):
        self.cell_off = np.cumsum([0] + [s.ncells for s in sources])
        self.part_off = np.cumsum([0] + [s.nparticles for s in sources])
        self.center = np.concatenate([s.center for s in sources])
        self.M = np.concatenate([s.M for s in sources])
        self.start = np.concatenate([s.start + off for s, off in zip(sources, self.part_off)])
        self.count = np.concatenate([s.count for s in sources])
        self.pos = np.concatenate([s.pos for s in sources])
        self.q = np.concatenate([s.q for s in sources])
        self.ids = np.concatenate([s.ids for s in sources])


def evaluate(target: Tree, sources: Tree | Sequence[Tree], cfg: TraversalConfig,
             gradient: bool = False) -> EvalResult:
    """Potentials at the particles of ``target`` due to the source forest."""
    if isinstance(sources, Tree):
        sources = [sources]
    sources = list(sources)
    p = cfg.p
    for s in sources:
        if s.p != p or target.p != p:
            raise ValueError("all trees must share the configured expansion order")
    inter = traverse(target, sources, cfg.theta)
    forest = _Forest(sources)

    L = np.zeros((target.ncells, ex.n_terms(p)))
    if inter.n_m2l:
        src = forest.cell_off[inter.m2l_tree] + inter.m2l_source
        r = target.center[inter.m2l_target] - forest.center[src]
        np.add.at(L, inter.m2l_target, ex.m2l(forest.M[src], r, p))

    for lev in range(1, int(target.level.max()) + 1):
        cells = np.flatnonzero(target.level == lev)
        par = target.parent[cells]
        L[cells] += ex.l2l(L[par], target.center[cells] - target.center[par], p)

    n = target.nparticles
    leaves = target.leaves()
    leaf_of = np.empty(n, dtype=np.int64)
    for c in leaves:
        leaf_of[target.start[c]:target.start[c] + target.count[c]] = c
    far = ex.l2p(L[leaf_of], target.center[leaf_of], target.pos, p, gradient=gradient)
    if gradient:
        phi, grad = far
    else:
        phi, grad = far, None

    coincident = _p2p(target, forest, inter, phi, grad)

    out_phi = np.empty(n)
    out_phi[target.perm] = phi
    out_grad = None
    if grad is not None:
        out_grad = np.empty((n, 3))
        out_grad[target.perm] = grad
    return EvalResult(out_phi, out_grad, inter, coincident,
                      {"m2l": inter.n_m2l, "p2p": inter.n_p2p})


def _p2p(target: Tree, forest: _Forest, inter: Interactions, phi, grad) -> int:
    if not inter.n_p2p:
        return 0
    src = forest.cell_off[inter.p2p_tree] + inter.p2p_source
    order = np.argsort(inter.p2p_target, kind="stable")
    tgt_sorted = inter.p2p_target[order]
    src_sorted = src[order]
    cuts = np.flatnonzero(np.diff(tgt_sorted)) + 1
    coincident = 0
    for tg, group in zip(np.split(tgt_sorted, cuts), np.split(src_sorted, cuts)):
        a = tg[0]
        ts, tcnt = target.start[a], target.count[a]
        idx = np.concatenate([np.arange(forest.start[b], forest.start[b] + forest.count[b]) for b in group])
        res = _pair_block(target.pos[ts:ts + tcnt], target.ids[ts:ts + tcnt],
                          forest.pos[idx], forest.q[idx], forest.ids[idx], grad is not None)
        phi[ts:ts + tcnt] += res[0]
        if grad is not None:
            grad[ts:ts + tcnt] += res[1]
        coincident += res[2]
    return coincident


def _pair_block(tpos, tids, spos, sq, sids, gradient):
    diff = tpos[:, None, :] - spos[None, :, :]
    r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    self_pair = tids[:, None] == sids[None, :]
    zero = r == 0.0
    coincident = int(np.count_nonzero(zero & ~self_pair))
    skip = zero | self_pair
    inv = np.divide(1.0, r, out=np.zeros_like(r), where=~skip)
    phi = inv @ sq
    g = None
    if gradient:
        w = sq[None, :] * inv ** 3
        g = -np.einsum("ij,ijk->ik", w, diff)
    return phi, g, coincident


def direct_sum(targets: Particles, sources: Particles, gradient: bool = False, chunk: int = 512):
    """O(N*M) reference: phi_i = sum_{j != i} q_j / |x_i - x_j|.

    Self pairs are identified by particle id. Returns ``(phi, grad, coincident)``.
    """
    n = len(targets)
    phi = np.zeros(n)
    grad = np.zeros((n, 3)) if gradient else None
    coincident = 0
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        res = _pair_block(targets.pos[s:e], targets.ids[s:e], sources.pos, sources.q, sources.ids, gradient)
        phi[s:e] = res[0]
        if gradient:
            grad[s:e] = res[1]
        coincident += res[2]
    return phi, grad, coincident
