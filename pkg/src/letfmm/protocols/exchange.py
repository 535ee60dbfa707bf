"""LET exchange protocols running on the simulated network."""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .. import simnet
from ..fmmcore.tree import TraversalConfig
from ..lettree import LetCellMsg, reduce_messages
from ..space import Box3
from .graph import CommGraph, ConfigurationError, NeighborSet, build_comm_graph

BUNDLE_HEADER_BYTES = 8  # origin + destination rank
META_BYTES = 16


class ProtocolKind(enum.Enum):
    BULK = "bulk"
    GRANULAR = "granular"
    HYPERCUBE = "hypercube"
    NBX = "nbx"
    HSDX = "hsdx"


@dataclass(frozen=True)
class Protocol:
    kind: ProtocolKind
    grain: int = 1

    def __post_init__(self):
        if self.grain < 1:
            raise ValueError("grain must be >= 1")

    @classmethod
    def parse(cls, text: str, grain: int | None = None) -> "Protocol":
        kind = ProtocolKind(text)
        return cls(kind, grain if grain is not None else 1)

    def __str__(self):
        return f"granular:{self.grain}" if self.kind is ProtocolKind.GRANULAR else self.kind.value


ALL_KINDS = tuple(ProtocolKind)


@dataclass(frozen=True, eq=False)
class Bundle:
    """Cells owed by ``origin`` to ``dest``, as carried on the wire."""

    origin: int
    dest: int
    cells: tuple[LetCellMsg, ...]

    @property
    def nbytes(self) -> int:
        return BUNDLE_HEADER_BYTES + sum(c.nbytes for c in self.cells)


def _bundle_bytes(bundles: Sequence[Bundle]) -> int:
    return sum(b.nbytes for b in bundles)


@dataclass
class ExchangeContext:
    """What every rank knows before the exchange: all bounds and leaf radii."""

    bounds: list[Box3]
    leaf_radius: list[float | None]
    cfg: TraversalConfig
    neighbors: list[NeighborSet] | None = None
    graphs: list[CommGraph] | None = None

    @property
    def size(self) -> int:
        return len(self.bounds)

    def comm_graphs(self) -> list[CommGraph]:
        if self.graphs is None:
            if self.neighbors is None and self.size == 1:
                self.neighbors = [NeighborSet(0, (), 0.0)]
            if self.neighbors is None:
                raise ConfigurationError("hierarchical exchange needs neighbour sets")
            self.graphs = [build_comm_graph(self.neighbors, d) for d in range(self.size)]
        return self.graphs


@dataclass
class ExchangeResult:
    protocol: Protocol
    received: list[dict[int, list[LetCellMsg]]]
    run: simnet.RunResult
    overlap: int = 0
    relay_counts: dict[tuple[int, int, int], int] = field(default_factory=dict)
    holdings: dict[tuple[int, int], tuple] = field(default_factory=dict)

    @property
    def steps(self) -> list[simnet.StepMetrics]:
        return self.run.steps

    @property
    def messages(self) -> int:
        return self.run.messages

    @property
    def bytes(self) -> int:
        return self.run.bytes

    @property
    def nsteps(self) -> int:
        return self.run.nsteps

    def cost(self, model: simnet.CostModel | None = None) -> float:
        return simnet.modeled_cost(self.run.steps, model)

    def non_neighbor_messages(self, nsets: Sequence[NeighborSet]) -> int:
        return sum(1 for m in self.run.log if m.dst not in nsets[m.src])

    def received_idents(self, rank: int) -> list[tuple]:
        """Sorted (origin, level, key, payload count) of everything ``rank`` received."""
        out = []
        for cells in self.received[rank].values():
            for c in cells:
                out.append(c.ident + (len(c.particles) if c.is_leaf_payload else -1,))
        return sorted(out)


Outgoing = Mapping[tuple[int, int], Sequence[LetCellMsg]]


def _by_source(outgoing: Outgoing, P: int) -> list[list[Bundle]]:
    per = [[] for _ in range(P)]
    for (o, d), cells in sorted(outgoing.items()):
        if o == d:
            raise ValueError(f"self-addressed cells on rank {o}")
        if not 0 <= o < P or not 0 <= d < P:
            raise ValueError(f"pair ({o}, {d}) outside 0..{P - 1}")
        if cells:
            per[o].append(Bundle(o, d, tuple(cells)))
    return per


def _collect(results, P) -> list[dict[int, list[LetCellMsg]]]:
    received = []
    for r in range(P):
        got: dict[int, list[LetCellMsg]] = {}
        for b in results[r]:
            if b.dest != r:
                raise RuntimeError(f"rank {r} ended holding cells for rank {b.dest}")
            if b.origin in got:
                raise RuntimeError(f"rank {r} received cells from {b.origin} twice")
            got[b.origin] = list(b.cells)
        received.append(dict(sorted(got.items())))
    return received


def exchange(protocol: Protocol, outgoing: Outgoing, ctx: ExchangeContext,
             model: simnet.CostModel | None = None, order_seed: int | None = None) -> ExchangeResult:
    """Deliver every ``outgoing[(origin, dest)]`` cell list to ``dest``."""
    P = ctx.size
    src = _by_source(outgoing, P)
    kind = protocol.kind
    extra: dict = {}
    if kind is ProtocolKind.BULK:
        prog = _bulk_program(src)
    elif kind is ProtocolKind.GRANULAR:
        prog = _granular_program(src, protocol.grain, extra)
    elif kind is ProtocolKind.HYPERCUBE:
        if P & (P - 1):
            raise ConfigurationError(f"hypercube exchange needs a power-of-two rank count, got {P}")
        prog = _hypercube_program(src, extra)
    elif kind is ProtocolKind.NBX:
        prog = _nbx_program(src)
    elif kind is ProtocolKind.HSDX:
        prog = _hsdx_program(src, ctx, extra)
    else:  # pragma: no cover
        raise ValueError(kind)
    res = simnet.run(P, prog, model=model, order_seed=order_seed)
    return ExchangeResult(protocol, _collect(res.results, P), res,
                          extra.get("overlap", 0), dict(extra.get("relay", {})),
                          extra.get("holdings", {}))


# -- bulk all-to-all ---------------------------------------------------------


def _bulk_program(src):
    def prog(ctx):
        for b in src[ctx.rank]:
            ctx.send(b.dest, "let", b, b.nbytes)
        yield
        return [payload for _, payload in _drain(ctx, "let")]
    return prog


def _drain(ctx, tag):
    out = []
    for s, t in ctx.pending_tags():
        if t == tag:
            while ctx.has(s, t):
                out.append((s, ctx._take(s, t)))
    return sorted(out, key=lambda x: x[0])


# -- fixed-grain messages ------------------------------------------------------


def subtree_end(levels: Sequence[int]) -> np.ndarray:
    """For a preorder cell list, the index of the last cell of each cell's subtree."""
    n = len(levels)
    end = np.empty(n, dtype=np.int64)
    stack: list[int] = []
    for i, lev in enumerate(levels):
        while stack and levels[stack[-1]] >= lev:
            end[stack.pop()] = i - 1
        stack.append(i)
    for j in stack:
        end[j] = n - 1
    return end


def overlap_units(cells: Sequence[LetCellMsg], grain: int) -> int:
    """Cells whose whole subtree arrives before the last chunk: traversable early."""
    n = len(cells)
    if n <= grain:
        return 0
    last_start = ((n - 1) // grain) * grain
    end = subtree_end([c.key.level for c in cells])
    return int(np.count_nonzero(end < last_start))


def _granular_program(src, grain, extra):
    extra["overlap"] = sum(overlap_units(b.cells, grain) for bs in src for b in bs)

    def prog(ctx):
        for b in src[ctx.rank]:
            for s in range(0, len(b.cells), grain):
                chunk = Bundle(b.origin, b.dest, b.cells[s:s + grain])
                ctx.send(b.dest, "let", chunk, chunk.nbytes)
        yield
        parts = defaultdict(list)
        for s, chunk in _drain(ctx, "let"):
            parts[s].extend(chunk.cells)
        return [Bundle(o, ctx.rank, tuple(c)) for o, c in sorted(parts.items())]
    return prog


# -- hypercube pairwise exchange -------------------------------------------------


def _hypercube_program(src, extra):
    holdings: dict[tuple[int, int], tuple] = {}
    extra["holdings"] = holdings

    def prog(ctx):
        r, P = ctx.rank, ctx.size
        held = list(src[r])
        bit = 0
        while (1 << bit) < P:
            partner = r ^ (1 << bit)
            away = [b for b in held if (b.dest >> bit) & 1 != (r >> bit) & 1]
            held = [b for b in held if (b.dest >> bit) & 1 == (r >> bit) & 1]
            ctx.send(partner, ("hc", bit), tuple(away), _bundle_bytes(away))
            got = yield ctx.wait(partner, ("hc", bit))
            held.extend(got)
            held.sort(key=lambda b: (b.origin, b.dest))
            holdings[(r, bit)] = tuple((b.origin, b.dest) for b in held)
            bit += 1
        return held
    return prog


# -- NBX-style sparse direct sends -------------------------------------------------


def _nbx_program(src):
    def prog(ctx):
        for b in src[ctx.rank]:
            ctx.send(b.dest, "meta", b.nbytes, META_BYTES)
        yield
        expect = [s for s, _ in _drain(ctx, "meta")]
        for b in src[ctx.rank]:
            ctx.send(b.dest, "let", b, b.nbytes)
        out = []
        for s in expect:
            out.append((yield ctx.wait(s, "let")))
        return out
    return prog


# -- hierarchical sparse exchange -------------------------------------------------


def _hsdx_program(src, xctx: ExchangeContext, extra):
    graphs = xctx.comm_graphs()
    nsets = xctx.neighbors
    rounds = max((g.depth for g in graphs), default=0)
    relay: dict[tuple[int, int, int], int] = defaultdict(int)
    extra["relay"] = relay

    def prog(ctx):
        r = ctx.rank
        neigh = nsets[r].neighbors
        held = list(src[r])
        done: list[Bundle] = []
        for rnd in range(1, rounds + 1):
            moving = defaultdict(list)
            for b in held:
                nxt = graphs[b.dest].relay_of[r]
                if nxt not in nsets[r]:
                    raise RuntimeError(f"relay {nxt} of rank {r} is not a neighbour")
                moving[nxt].append(b)
            held = []
            for n in neigh:
                ctx.send(n, ("meta", rnd), _bundle_bytes(moving.get(n, ())), META_BYTES)
            sizes = {}
            for n in neigh:
                sizes[n] = yield ctx.wait(n, ("meta", rnd))
            for n in neigh:
                if moving.get(n):
                    ctx.send(n, ("let", rnd), tuple(moving[n]), _bundle_bytes(moving[n]))
            for n in neigh:
                if not sizes[n]:
                    continue
                for b in (yield ctx.wait(n, ("let", rnd))):
                    if b.dest == r:
                        if b.origin != n:
                            relay[(r, rnd, n)] += 1
                        done.append(b)
                    else:
                        cells = reduce_messages(b.cells, xctx.bounds[b.dest], xctx.cfg,
                                                xctx.leaf_radius[b.dest])
                        held.append(Bundle(b.origin, b.dest, tuple(cells)))
            held.sort(key=lambda b: (b.origin, b.dest))
        if held:
            raise RuntimeError(f"rank {r} still holds undelivered cells after {rounds} rounds")
        return sorted(done, key=lambda b: b.origin)
    return prog


# -- grain sweep -----------------------------------------------------------------


def max_pair_cells(outgoing: Outgoing) -> int:
    return max((len(c) for c in outgoing.values()), default=1)


def default_grains(outgoing: Outgoing) -> list[int]:
    total = max_pair_cells(outgoing)
    grains, g = [], 1
    while g < total:
        grains.append(g)
        g *= 2
    grains.append(total)
    return grains


def sweep_grain(grains: Sequence[int], outgoing: Outgoing, ctx: ExchangeContext,
                model: simnet.CostModel | None = None) -> list[dict]:
    """One granular exchange per grain; rows of grain, messages, bytes, cost, overlap."""
    model = model or simnet.CostModel()
    rows = []
    for g in grains:
        res = exchange(Protocol(ProtocolKind.GRANULAR, int(g)), outgoing, ctx, model)
        rows.append({
            "grain": int(g),
            "messages": res.messages,
            "bytes": res.bytes,
            "eager": sum(s.eager for s in res.steps),
            "rendezvous": sum(s.rendezvous for s in res.steps),
            "modeled_cost": res.cost(model),
            "overlap_units": res.overlap,
        })
    return rows
