"""Command-line entry point: ``letfmm solve | recipe | partition-report``.

Every flag can also be set through an environment variable named
``LETFMM_<FLAG>`` (upper case, dashes as underscores); explicit flags win.
Exit status: 0 success, 2 configuration error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .experiment import (
    RECIPE_DEFAULTS,
    RECIPES,
    ConfigError,
    ExperimentConfig,
    VerificationError,
    _write_echo,
    _write_rows,
    run_recipe,
    run_solve,
)
from .partition import PartitionScheme, SchemeKind, connectivity_components, default_linking_length, partition
from .protocols import ConfigurationError
from .space import Distribution, DistKind, generate

ENV_PREFIX = "LETFMM_"
EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 2, 3

# flag name -> (config field, type)
FLAGS = {
    "n": ("n", int),
    "dist": ("dist", str),
    "ranks": ("ranks", int),
    "scheme": ("scheme", str),
    "protocol": ("protocol", str),
    "grain": ("grain", int),
    "order": ("order", int),
    "theta": ("theta", float),
    "leaf": ("leaf", int),
    "seed": ("seed", int),
    "epsilon": ("epsilon", float),
    "alpha": ("alpha", float),
    "beta": ("beta", float),
    "eager-threshold": ("eager_threshold", int),
    "rendezvous-penalty": ("rendezvous_penalty", float),
    "oracle-cap": ("oracle_cap", int),
    "out": ("out", str),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for flag, (_, typ) in FLAGS.items():
        p.add_argument(f"--{flag}", type=typ, default=None, metavar=flag.upper().replace("-", "_"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="letfmm", description="Distributed FMM communication laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="run the full pipeline once and verify it")
    _add_config_flags(solve)

    recipe = sub.add_parser("recipe", help="run a named experiment")
    recipe.add_argument("name", choices=RECIPES)
    _add_config_flags(recipe)

    report = sub.add_parser("partition-report", help="per-rank counts, bounds and connectivity")
    _add_config_flags(report)
    report.add_argument("--link", type=float, default=None, help="linking length (default: 4x mean NN spacing)")
    return parser


def _overrides(args: argparse.Namespace, environ) -> dict:
    """Config values from the environment, then from explicit flags."""
    out = {}
    for flag, (name, typ) in FLAGS.items():
        env = environ.get(ENV_PREFIX + flag.upper().replace("-", "_"))
        if env is not None:
            try:
                out[name] = typ(env)
            except ValueError as exc:
                raise ConfigError(f"{ENV_PREFIX}{flag.upper().replace('-', '_')}={env!r}: {exc}") from None
        val = getattr(args, flag.replace("-", "_"))
        if val is not None:
            out[name] = val
    return out


def make_config(args: argparse.Namespace, environ=None, base: dict | None = None) -> ExperimentConfig:
    """Unvalidated config: recipe defaults, then environment, then flags."""
    environ = os.environ if environ is None else environ
    return ExperimentConfig(**{**(base or {}), **_overrides(args, environ)})


def _partition_report(cfg: ExperimentConfig, link: float | None) -> list[dict]:
    particles = generate(Distribution(DistKind(cfg.dist), cfg.n, cfg.seed))
    parts = partition(particles, PartitionScheme(SchemeKind(cfg.scheme), cfg.ranks), n_leaf=cfg.leaf)
    link = link if link is not None else default_linking_length(particles.pos)
    rows = []
    for p in parts:
        rows.append({"rank": p.rank, "count": p.count,
                     "lo_x": p.bounds.lo[0], "lo_y": p.bounds.lo[1], "lo_z": p.bounds.lo[2],
                     "hi_x": p.bounds.hi[0], "hi_y": p.bounds.hi[1], "hi_z": p.bounds.hi[2],
                     "components": connectivity_components(p, link)})
    return rows


def _origin_module(exc: BaseException) -> str:
    tb = exc.__traceback__
    name = "letfmm"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("letfmm"):
            name = mod
        tb = tb.tb_next
    return name


def _report(kind: str, exc: BaseException, cfg: ExperimentConfig | None) -> None:
    print(f"{kind} [{_origin_module(exc)}]: {exc}", file=sys.stderr)
    if cfg is not None:
        print("config: " + json.dumps(cfg.echo(), sort_keys=True), file=sys.stderr)


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = None
    try:
        if args.command == "solve":
            cfg = make_config(args, environ)
            cfg.validate()
            try:
                outcome = run_solve(cfg)
            except VerificationError as exc:
                _report("verification failed", exc, cfg)
                return EXIT_VERIFY
            print(json.dumps(outcome.summary, sort_keys=True))
        elif args.command == "recipe":
            cfg = make_config(args, environ, RECIPE_DEFAULTS[args.name])
            cfg.validate()
            written = run_recipe(args.name, cfg)
            for path in written.values():
                print(path)
        else:
            cfg = make_config(args, environ)
            cfg.validate()
            rows = _partition_report(cfg, args.link)
            out = Path(cfg.out or ".")
            out.mkdir(parents=True, exist_ok=True)
            path = out / "partition_report.csv"
            _write_rows(path, rows)
            _write_echo(path.with_suffix(".config.json"), cfg, {"command": "partition-report"})
            print(path)
    except (ConfigError, ConfigurationError, ValueError) as exc:
        # module preconditions raise ValueError subclasses; all map to a config exit
        _report("configuration error", exc, cfg)
        return EXIT_CONFIG
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
