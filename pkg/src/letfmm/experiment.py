"""End-to-end pipelines: generate, partition, build, exchange, evaluate, verify."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import simnet
from .fmmcore import TraversalConfig, Tree, build_tree, direct_sum, evaluate, upward_pass
from .lettree import LetCellMsg, extract_essential, graft, total_bytes
from .partition import (
    Partition,
    PartitionScheme,
    SchemeKind,
    balance,
    connectivity_components,
    default_linking_length,
    partition,
)
from .protocols import (
    ConfigurationError,
    ExchangeContext,
    ExchangeResult,
    Protocol,
    ProtocolKind,
    build_neighbors,
    default_grains,
    exchange,
    sweep_grain,
)
from .space import Distribution, DistKind, Particles, generate

ORACLE_CAP = 20_000
ORACLE_SAMPLE = 1000
ACCURACY_TOL = 1e-3
EQUIVALENCE_TOL = 1e-10
RECIPES = ("boundary-weakness", "grain-sweep", "protocol-faceoff")


class ConfigError(ValueError):
    """Invalid experiment configuration (exit status 2)."""


class VerificationError(RuntimeError):
    """A run finished but failed its accuracy or equivalence check (exit status 3)."""


@dataclass(frozen=True)
class ExperimentConfig:
    n: int = 4096
    dist: str = "sphere-surface"
    seed: int = 0
    ranks: int = 8
    scheme: str = "hybrid-orb"
    protocol: str = "hsdx"
    grain: int = 16
    order: int = 4
    theta: float = 0.4
    leaf: int = 64
    epsilon: float | None = None
    alpha: float = 1000.0
    beta: float = 1.0
    eager_threshold: int = simnet.EAGER_THRESHOLD
    rendezvous_penalty: float = 1.0
    oracle_cap: int = ORACLE_CAP
    out: str | None = None

    def validate(self) -> "ExperimentConfig":
        def bad(msg):
            raise ConfigError(msg)
        if self.n < 1:
            bad(f"--n must be positive, got {self.n}")
        if self.ranks < 1:
            bad(f"--ranks must be >= 1, got {self.ranks}")
        if self.n < self.ranks:
            bad(f"--n ({self.n}) must be at least --ranks ({self.ranks})")
        try:
            DistKind(self.dist)
        except ValueError:
            bad(f"--dist must be one of {[d.value for d in DistKind]}, got {self.dist!r}")
        try:
            SchemeKind(self.scheme)
        except ValueError:
            bad(f"--scheme must be one of {[s.value for s in SchemeKind]}, got {self.scheme!r}")
        try:
            kind = ProtocolKind(self.protocol)
        except ValueError:
            bad(f"--protocol must be one of {[p.value for p in ProtocolKind]}, got {self.protocol!r}")
        if kind is ProtocolKind.HYPERCUBE and self.ranks & (self.ranks - 1):
            bad(f"hypercube protocol needs a power-of-two --ranks, got {self.ranks}")
        if self.grain < 1:
            bad(f"--grain must be >= 1, got {self.grain}")
        if self.order < 1:
            bad(f"--order must be >= 1, got {self.order}")
        if not 0.0 < self.theta < 1.0:
            bad(f"--theta must lie in (0, 1), got {self.theta}")
        if self.leaf < 1:
            bad(f"--leaf must be >= 1, got {self.leaf}")
        if self.epsilon is not None and self.epsilon < 0:
            bad("--epsilon must be nonnegative")
        for name in ("alpha", "beta", "eager_threshold", "rendezvous_penalty"):
            if getattr(self, name) < 0:
                bad(f"--{name.replace('_', '-')} must be nonnegative")
        return self

    @property
    def traversal(self) -> TraversalConfig:
        return TraversalConfig(theta=self.theta, n_leaf=self.leaf, p=self.order)

    @property
    def cost_model(self) -> simnet.CostModel:
        return simnet.CostModel(self.alpha, self.beta, self.eager_threshold, self.rendezvous_penalty)

    @property
    def protocol_spec(self) -> Protocol:
        return Protocol(ProtocolKind(self.protocol), self.grain)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def echo(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Setup:
    cfg: ExperimentConfig
    particles: Particles
    parts: list[Partition]
    trees: list[Tree]
    context: ExchangeContext
    outgoing: dict[tuple[int, int], list[LetCellMsg]] = field(default_factory=dict)


def build_rank_trees(parts: Sequence[Partition], tcfg: TraversalConfig) -> list[Tree]:
    return [upward_pass(build_tree(p.particles, p.tree_bounds, tcfg, origin=p.rank)) for p in parts]


def essential_outgoing(trees: Sequence[Tree], parts: Sequence[Partition],
                       tcfg: TraversalConfig) -> dict[tuple[int, int], list[LetCellMsg]]:
    P = len(trees)
    out = {}
    for o in range(P):
        for d in range(P):
            if o != d:
                out[(o, d)] = extract_essential(trees[o], parts[d].bounds, tcfg, o, trees[d].leaf_radius)
    return out


def prepare(cfg: ExperimentConfig, particles: Particles | None = None) -> Setup:
    cfg.validate()
    tcfg = cfg.traversal
    if particles is None:
        particles = generate(Distribution(DistKind(cfg.dist), cfg.n, cfg.seed))
    parts = partition(particles, PartitionScheme(SchemeKind(cfg.scheme), cfg.ranks), n_leaf=cfg.leaf)
    trees = build_rank_trees(parts, tcfg)
    nsets = build_neighbors([p.domain for p in parts], cfg.epsilon) if cfg.ranks > 1 else None
    ctx = ExchangeContext([p.bounds for p in parts], [t.leaf_radius for t in trees], tcfg, nsets)
    return Setup(cfg, particles, parts, trees, ctx, essential_outgoing(trees, parts, tcfg))


def evaluate_received(setup: Setup, received: Sequence[dict[int, list[LetCellMsg]]]) -> np.ndarray:
    """Graft what every rank received and evaluate its own particles; global id order."""
    tcfg = setup.cfg.traversal
    phi = np.zeros(len(setup.particles))
    for part, tree, got in zip(setup.parts, setup.trees, received):
        let = graft(tree, got)
        phi[part.particles.ids] = evaluate(tree, let.sources(), tcfg).phi
    return phi


def forest_oracle(setup: Setup) -> np.ndarray:
    """Each rank's particles against all complete per-rank trees, with no network."""
    tcfg = setup.cfg.traversal
    phi = np.zeros(len(setup.particles))
    P = len(setup.trees)
    for d, (part, tree) in enumerate(zip(setup.parts, setup.trees)):
        sources = [tree] + [setup.trees[o] for o in range(P) if o != d]
        phi[part.particles.ids] = evaluate(tree, sources, tcfg).phi
    return phi


def serial_potential(particles: Particles, tcfg: TraversalConfig) -> np.ndarray:
    from .space import Box3

    tree = upward_pass(build_tree(particles, Box3.around(particles.pos), tcfg))
    phi = np.zeros(len(particles))
    phi[particles.ids] = evaluate(tree, tree, tcfg).phi
    return phi


def rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    den = float(np.linalg.norm(b))
    return float(np.linalg.norm(a - b)) / den if den else float(np.linalg.norm(a - b))


def direct_error(particles: Particles, phi: np.ndarray, cap: int, sample: int = ORACLE_SAMPLE,
                 seed: int = 0) -> tuple[float, int]:
    """Relative L2 error against direct summation; sampled targets above ``cap``."""
    n = len(particles)
    if n <= cap:
        idx = np.arange(n)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(n, min(sample, n), replace=False))
    ref, _, _ = direct_sum(particles.subset(idx), particles)
    return rel_l2(phi[particles.ids[idx]], ref), len(idx)


@dataclass
class SolveOutcome:
    summary: dict
    exchange: ExchangeResult | None
    phi: np.ndarray


def run_solve(cfg: ExperimentConfig, write: bool = True) -> SolveOutcome:
    """Full pipeline for one configuration; raises VerificationError on failed checks."""
    setup = prepare(cfg)
    tcfg = cfg.traversal
    res = None
    if cfg.ranks == 1:
        phi = serial_potential(setup.particles, tcfg)
    else:
        res = exchange(cfg.protocol_spec, setup.outgoing, setup.context, cfg.cost_model)
        phi = evaluate_received(setup, res.received)
    err, ntarget = direct_error(setup.particles, phi, cfg.oracle_cap)
    lo, hi = balance(setup.parts)
    summary = {
        "n": cfg.n, "ranks": cfg.ranks, "scheme": cfg.scheme, "protocol": str(cfg.protocol_spec),
        "rel_l2_error": err, "oracle_targets": ntarget,
        "messages": res.messages if res else 0, "bytes": res.bytes if res else 0,
        "steps": res.nsteps if res else 1,
        "modeled_cost": res.cost(cfg.cost_model) if res else 0.0,
        "min_count": lo, "max_count": hi,
    }
    checks = [("accuracy", err <= ACCURACY_TOL, f"relative L2 error {err:.3e} > {ACCURACY_TOL:g}")]
    if cfg.ranks > 1 and cfg.n <= cfg.oracle_cap:
        forest = forest_oracle(setup)
        dev = rel_l2(phi, forest)
        summary["forest_rel_diff"] = dev
        summary["single_rank_rel_diff"] = rel_l2(phi, serial_potential(setup.particles, tcfg))
        checks.append(("equivalence", dev <= EQUIVALENCE_TOL,
                       f"distributed result deviates from the serial forest by {dev:.3e}"))
    summary["verified"] = all(ok for _, ok, _ in checks)
    if write and cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "solve_summary.csv", [summary])
        simnet.write_metrics_csv(out / "solve_steps.csv", res.steps if res else [])
        _write_echo(out / "solve_summary.config.json", cfg, {"command": "solve"})
    failed = [msg for _, ok, msg in checks if not ok]
    if failed:
        raise VerificationError("; ".join(failed))
    return SolveOutcome(summary, res, phi)


# -- recipes ---------------------------------------------------------------------


RECIPE_DEFAULTS = {
    "boundary-weakness": dict(n=100_000, ranks=64, dist="sphere-surface"),
    "grain-sweep": dict(n=20_000, ranks=8, dist="sphere-surface", scheme="hybrid-orb"),
    "protocol-faceoff": dict(n=20_000, ranks=64, dist="sphere-surface", scheme="hybrid-orb"),
}


def boundary_weakness(cfg: ExperimentConfig) -> tuple[list[dict], list[dict]]:
    particles = generate(Distribution(DistKind(cfg.dist), cfg.n, cfg.seed))
    link = default_linking_length(particles.pos)
    per_rank, summary = [], []
    for scheme in (SchemeKind.HOT_HILBERT, SchemeKind.HYBRID_ORB):
        setup = prepare(cfg.replace(scheme=scheme.value), particles)
        sent = {r: 0 for r in range(cfg.ranks)}
        for (o, _), cells in setup.outgoing.items():
            sent[o] += total_bytes(cells)
        comps = [connectivity_components(p, link) for p in setup.parts]
        for p, c in zip(setup.parts, comps):
            per_rank.append({"scheme": scheme.value, "rank": p.rank, "count": p.count,
                             "components": c, "let_bytes_sent": sent[p.rank]})
        summary.append({"scheme": scheme.value, "linking_length": link,
                        "max_components": max(comps), "multi_component_ranks": sum(c > 1 for c in comps),
                        "total_let_bytes": sum(sent.values()),
                        "total_let_cells": sum(len(c) for c in setup.outgoing.values())})
    return per_rank, summary


def grain_sweep(cfg: ExperimentConfig, grains: Sequence[int] | None = None) -> list[dict]:
    setup = prepare(cfg)
    grains = list(grains) if grains else default_grains(setup.outgoing)
    return sweep_grain(grains, setup.outgoing, setup.context, cfg.cost_model)


def protocol_faceoff(cfg: ExperimentConfig) -> list[dict]:
    setup = prepare(cfg)
    rows = []
    for kind in ProtocolKind:
        if kind is ProtocolKind.HYPERCUBE and cfg.ranks & (cfg.ranks - 1):
            continue
        res = exchange(Protocol(kind, cfg.grain), setup.outgoing, setup.context, cfg.cost_model)
        steps = res.steps
        rows.append({
            "protocol": str(res.protocol), "messages": res.messages, "bytes": res.bytes,
            "steps": res.nsteps, "modeled_cost": res.cost(cfg.cost_model),
            "max_rank_msgs": max((s.max_rank_msgs for s in steps), default=0),
            "eager": sum(s.eager for s in steps), "rendezvous": sum(s.rendezvous for s in steps),
            "non_neighbor_messages": res.non_neighbor_messages(setup.context.neighbors)
            if setup.context.neighbors else 0,
        })
    return rows


def run_recipe(name: str, cfg: ExperimentConfig, out: str | os.PathLike | None = None) -> dict[str, Path]:
    """Run a named recipe and write its CSV files plus config echoes; returns the paths."""
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; choose from {list(RECIPES)}")
    cfg.validate()
    out = Path(out or cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    stem = name.replace("-", "_")
    files: dict[str, list[dict]] = {}
    if name == "boundary-weakness":
        per_rank, summary = boundary_weakness(cfg)
        files[f"{stem}.csv"] = per_rank
        files[f"{stem}_summary.csv"] = summary
    elif name == "grain-sweep":
        files[f"{stem}.csv"] = grain_sweep(cfg)
    else:
        files[f"{stem}.csv"] = protocol_faceoff(cfg)
    written = {}
    for fname, rows in files.items():
        path = out / fname
        _write_rows(path, rows)
        _write_echo(path.with_suffix(".config.json"), cfg, {"recipe": name})
        written[fname] = path
    return written


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.writer(fh, lineterminator="\n")
        keys = list(rows[0])
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in keys])


def _write_echo(path: Path, cfg: ExperimentConfig, extra: dict) -> None:
    doc = {**extra, "config": cfg.echo()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
