"""Deterministic bulk-synchronous message-passing simulator.

Rank programs are generator functions ``program(ctx)``. Inside a program:

* ``ctx.send(dst, tag, payload, nbytes)`` stages a message for delivery at the
  next barrier;
* a bare ``yield`` ends the rank's current superstep (barrier);
* ``payload = yield ctx.wait(src, tag)`` blocks until a message from ``src``
  with ``tag`` is available and returns the oldest one;
* ``return value`` finishes the rank; the value is collected as its result.

Messages sent in superstep ``s`` are visible from superstep ``s + 1`` on.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Generator, Hashable, Iterable

import numpy as np

EAGER_THRESHOLD = 8192
CSV_COLUMNS = ("step", "messages", "bytes", "max_rank_msgs", "max_rank_bytes", "eager", "rendezvous")


class DeadlockError(RuntimeError):
    """Every unfinished rank waits on a message that can never arrive."""

    def __init__(self, waiting: dict[int, tuple[int, Hashable]]):
        self.waiting = dict(waiting)
        desc = ", ".join(f"rank {r} waits for (src={s}, tag={t!r})" for r, (s, t) in sorted(waiting.items()))
        super().__init__(f"deadlock: {desc}")


@dataclass(frozen=True)
class _Wait:
    src: int
    tag: Hashable


@dataclass(frozen=True)
class Message:
    step: int
    src: int
    dst: int
    tag: Hashable
    nbytes: int
    payload: Any = field(repr=False, compare=False)


@dataclass(frozen=True)
class CostModel:
    alpha: float = 1000.0
    beta: float = 1.0
    eager_threshold: int = EAGER_THRESHOLD
    rendezvous_penalty: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"cost model field {f.name} must be nonnegative")

    def is_eager(self, nbytes: int) -> bool:
        return nbytes <= self.eager_threshold


@dataclass
class StepMetrics:
    step: int
    messages: int = 0
    bytes: int = 0
    max_rank_msgs: int = 0
    max_rank_bytes: int = 0
    eager: int = 0
    rendezvous: int = 0
    max_rank_rendezvous: int = 0
    sent_bytes: int = 0

    def row(self) -> list[int]:
        return [getattr(self, c) for c in CSV_COLUMNS]


class RankCtx:
    def __init__(self, rank: int, size: int, state: Any = None):
        self.rank = rank
        self.size = size
        self.state = state
        self._inbox: dict[tuple[int, Hashable], deque] = {}
        self._outbox: list[tuple[int, Hashable, Any, int]] = []

    def send(self, dst: int, tag: Hashable, payload: Any, nbytes: int) -> None:
        if not 0 <= dst < self.size:
            raise ValueError(f"rank {self.rank} sends to invalid rank {dst}")
        if nbytes < 0:
            raise ValueError("nbytes must be nonnegative")
        self._outbox.append((dst, tag, payload, int(nbytes)))

    def wait(self, src: int, tag: Hashable) -> _Wait:
        return _Wait(src, tag)

    def has(self, src: int, tag: Hashable) -> bool:
        q = self._inbox.get((src, tag))
        return bool(q)

    def pending_tags(self) -> list[tuple[int, Hashable]]:
        return sorted((k for k, q in self._inbox.items() if q), key=repr)

    def _take(self, src, tag):
        return self._inbox[(src, tag)].popleft()


@dataclass
class RunResult:
    results: list
    steps: list[StepMetrics]
    log: list[Message]
    supersteps: int

    @property
    def nsteps(self) -> int:
        """Supersteps that carried traffic, at least 1."""
        return max(1, len(self.steps))

    @property
    def messages(self) -> int:
        return sum(s.messages for s in self.steps)

    @property
    def bytes(self) -> int:
        return sum(s.bytes for s in self.steps)


def run(P: int, program: Callable[[RankCtx], Generator], states: Iterable | None = None,
        order_seed: int | None = None, model: CostModel | None = None,
        max_supersteps: int = 100_000) -> RunResult:
    """Execute ``program`` on ``P`` simulated ranks in lockstep supersteps.

    ``order_seed`` permutes the order in which ranks are advanced inside each
    superstep; results and metrics do not depend on it.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    model = model or CostModel()
    states = list(states) if states is not None else [None] * P
    if len(states) != P:
        raise ValueError("one state per rank required")
    ctxs = [RankCtx(r, P, states[r]) for r in range(P)]
    gens = [program(c) for c in ctxs]
    results: list[Any] = [None] * P
    done = [False] * P
    waiting: dict[int, _Wait] = {}
    resume: list[Any] = [None] * P
    started = [False] * P
    rng = np.random.default_rng(order_seed) if order_seed is not None else None
    steps: list[StepMetrics] = []
    log: list[Message] = []
    superstep = 0

    while not all(done):
        if superstep >= max_supersteps:
            raise RuntimeError(f"no termination after {max_supersteps} supersteps")
        order = list(range(P)) if rng is None else [int(r) for r in rng.permutation(P)]
        for r in order:
            if done[r]:
                continue
            ctx, gen = ctxs[r], gens[r]
            w = waiting.get(r)
            if w is not None:
                if not ctx.has(w.src, w.tag):
                    continue
                del waiting[r]
                resume[r] = ctx._take(w.src, w.tag)
            while True:
                try:
                    if not started[r]:
                        started[r] = True
                        out = next(gen)
                    else:
                        val, resume[r] = resume[r], None
                        out = gen.send(val)
                except StopIteration as stop:
                    results[r] = stop.value
                    done[r] = True
                    break
                if isinstance(out, _Wait):
                    if ctx.has(out.src, out.tag):
                        resume[r] = ctx._take(out.src, out.tag)
                        continue
                    waiting[r] = out
                break

        staged = [(c.rank, m) for c in ctxs for m in c._outbox]
        for c in ctxs:
            c._outbox = []
        if staged:
            steps.append(_deliver(len(steps), staged, ctxs, log, model))
        elif not all(done):
            stuck = {r: w for r, w in waiting.items() if not ctxs[r].has(w.src, w.tag)}
            runnable = [r for r in range(P) if not done[r] and r not in stuck]
            if not runnable:
                raise DeadlockError({r: (w.src, w.tag) for r, w in stuck.items()})
        superstep += 1
    return RunResult(results, steps, log, superstep)


def _deliver(step: int, staged, ctxs, log, model: CostModel) -> StepMetrics:
    P = len(ctxs)
    recv_msgs = np.zeros(P, dtype=np.int64)
    recv_bytes = np.zeros(P, dtype=np.int64)
    recv_rdv = np.zeros(P, dtype=np.int64)
    m = StepMetrics(step)
    # canonical order: by sender, then send order, independent of rank scheduling
    staged.sort(key=lambda x: x[0])
    for src, (dst, tag, payload, nbytes) in staged:
        ctxs[dst]._inbox.setdefault((src, tag), deque()).append(payload)
        log.append(Message(step, src, dst, tag, nbytes, payload))
        m.messages += 1
        m.bytes += nbytes
        m.sent_bytes += nbytes
        recv_msgs[dst] += 1
        recv_bytes[dst] += nbytes
        if model.is_eager(nbytes):
            m.eager += 1
        else:
            m.rendezvous += 1
            recv_rdv[dst] += 1
    m.max_rank_msgs = int(recv_msgs.max())
    m.max_rank_bytes = int(recv_bytes.max())
    m.max_rank_rendezvous = int(recv_rdv.max())
    return m


def modeled_cost(steps: Iterable[StepMetrics], model: CostModel | None = None) -> float:
    """Critical-path cost: per step, the worst receiving rank's latency and volume."""
    model = model or CostModel()
    total = 0.0
    for s in steps:
        total += (model.alpha * s.max_rank_msgs + model.beta * s.max_rank_bytes
                  + model.alpha * model.rendezvous_penalty * s.max_rank_rendezvous)
    return total


def metrics_csv(steps: Iterable[StepMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    rows = [s.row() for s in steps]
    if not rows:
        rows = [StepMetrics(0).row()]
    w.writerows(rows)
    return buf.getvalue()


def write_metrics_csv(path, steps: Iterable[StepMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(metrics_csv(steps))
