"""Rank adjacency and the leveled relay trees used by the hierarchical exchange."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..space import Box3


class ConfigurationError(ValueError):
    """The partitioning or protocol parameters cannot support the requested exchange."""


@dataclass(frozen=True)
class NeighborSet:
    owner: int
    neighbors: tuple[int, ...]
    epsilon: float

    def __contains__(self, rank: int) -> bool:
        return rank in self.neighbors

    def __len__(self) -> int:
        return len(self.neighbors)


def default_epsilon(boxes: Sequence[Box3]) -> float:
    lo = np.min([b.lo for b in boxes], axis=0)
    hi = np.max([b.hi for b in boxes], axis=0)
    return 1e-9 * float(np.linalg.norm(hi - lo))


def build_neighbors(boxes: Sequence[Box3], epsilon: float | None = None) -> list[NeighborSet]:
    """Ranks whose boxes, each grown by ``epsilon``, overlap or touch in all three axes."""
    P = len(boxes)
    if epsilon is None:
        epsilon = default_epsilon(boxes)
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    lo = np.array([b.lo for b in boxes]) - epsilon
    hi = np.array([b.hi for b in boxes]) + epsilon
    adj = np.all((lo[:, None, :] <= hi[None, :, :]) & (lo[None, :, :] <= hi[:, None, :]), axis=2)
    np.fill_diagonal(adj, False)
    out = []
    for r in range(P):
        nb = tuple(int(j) for j in np.flatnonzero(adj[r]))
        if P >= 2 and not nb:
            raise ConfigurationError(f"rank {r} has no neighbours; the partitioning is disconnected")
        out.append(NeighborSet(r, nb, float(epsilon)))
    return out


def nb_bound(two_hop: int, zeta: int) -> int:
    """Per-neighbour relay budget ceil((tau - zeta) / (zeta - 1)).

    ``two_hop`` counts ranks within two hops, ``zeta`` ranks within one hop;
    both include the rank itself.
    """
    if zeta < 2:
        raise ValueError("neighbourhood count (including self) must be >= 2")
    if two_hop < zeta:
        raise ValueError("two-hop count cannot be smaller than the neighbourhood count")
    return -(-(two_hop - zeta) // (zeta - 1))


def two_hop_count(nsets: Sequence[NeighborSet], rank: int) -> int:
    reach = {rank, *nsets[rank].neighbors}
    for j in nsets[rank].neighbors:
        reach.update(nsets[j].neighbors)
    return len(reach)


def realized_nb_bound(nsets: Sequence[NeighborSet], rank: int) -> int:
    return nb_bound(two_hop_count(nsets, rank), len(nsets[rank]) + 1)


@dataclass
class CommGraph:
    """BFS relay tree rooted at ``owner``: data for the owner flows from level l to l-1."""

    owner: int
    levels: list[list[tuple[int, int]]]
    level_of: dict[int, int] = field(default_factory=dict)
    relay_of: dict[int, int] = field(default_factory=dict)
    load: dict[int, int] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def path(self, src: int) -> list[int]:
        """Ranks visited from ``src`` to the owner, both ends included."""
        out = [src]
        while out[-1] != self.owner:
            out.append(self.relay_of[out[-1]])
        return out

    def children(self, relay: int) -> list[int]:
        return sorted(v for v, r in self.relay_of.items() if r == relay)


def build_comm_graph(nsets: Sequence[NeighborSet], owner: int) -> CommGraph:
    """Leveled BFS tree over the neighbour graph with balanced relay choice.

    Ranks of each new level are placed most-constrained first (fewest candidate
    relays, then lowest id). Each goes to the candidate whose first-hop branch
    delivers the fewest ranks of this level so far, then to the candidate with
    the smallest relay load, then to the lowest id.
    """
    P = len(nsets)
    level_of = {owner: 0}
    relay_of: dict[int, int] = {}
    load: dict[int, int] = {}
    levels: list[list[tuple[int, int]]] = []
    branch = {owner: owner}
    frontier = [owner]
    while frontier:
        lev = len(levels) + 1
        front = set(frontier)
        fresh = sorted({j for f in frontier for j in nsets[f].neighbors if j not in level_of})
        if not fresh:
            break
        cands = {v: sorted(j for j in nsets[v].neighbors if j in front) for v in fresh}
        pairs = []
        # arrivals at the owner in this round, per first-hop neighbour
        branch_load: dict[int, int] = {}
        for v in sorted(fresh, key=lambda v: (len(cands[v]), v)):
            r = min(cands[v], key=lambda c: (branch_load.get(branch[c], 0), load.get(c, 0), c))
            load[r] = load.get(r, 0) + 1
            relay_of[v] = r
            level_of[v] = lev
            branch[v] = v if lev == 1 else branch[r]
            branch_load[branch[v]] = branch_load.get(branch[v], 0) + 1
            pairs.append((v, r))
        levels.append(sorted(pairs))
        frontier = fresh
    missing = [r for r in range(P) if r not in level_of]
    if missing:
        raise ConfigurationError(f"ranks unreachable from {owner} through neighbours: {missing}")
    return CommGraph(owner, levels, level_of, relay_of, load)
