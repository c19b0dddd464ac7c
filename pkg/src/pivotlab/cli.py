"""Command-line entry point: ``pivotlab {train,eval,sweep,fixture,gradcheck}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .env import load_fixture, reach_probability, write_tree
from .errors import ConfigError, NumericError, PivotLabError
from .harness.config import ALIASES, OPTIM_FIELDS, RUN_FIELDS, RunConfig, load_config, override
from .harness.metrics import write_records
from .harness.sweep import format_summary, sweep
from .harness.train import evaluate, load_checkpoint, make_envs, run_training, save_checkpoint

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

# Quoted probabilities of the appendix-a fixture: (description, computed, expected).
FIXTURE_CHECKS = (
    ("reach(M)", lambda env, pol: reach_probability(env, pol, env.node("M")), 0.032),
    ("reach(O | C)", lambda env, pol: reach_probability(env, pol, env.node("O"), start=env.node("C")), 0.08),
    ("reach(F)", lambda env, pol: reach_probability(env, pol, env.node("F")), 0.24),
    ("reach(G)", lambda env, pol: reach_probability(env, pol, env.node("G")), 0.2),
)
FIXTURE_TOL = 1e-12


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable); overrides the config's seeds")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("csv", "jsonl"), help="metrics file format")
    p.add_argument("-v", "--verbose", action="store_true")
    group = p.add_argument_group("config overrides")
    for name in sorted(RUN_FIELDS - {"seeds", "metrics_format"}):
        group.add_argument(f"--{name.replace('_', '-')}", dest=f"set_{name}", metavar="V")
    for name in sorted(OPTIM_FIELDS):
        flag = next((a for a, n in ALIASES.items() if n == name), name)
        group.add_argument(f"--{flag.replace('_', '-')}", dest=f"set_{name}", metavar="V")


def _build_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    for name in sorted(RUN_FIELDS | OPTIM_FIELDS):
        value = getattr(args, f"set_{name}", None)
        if value is not None:
            config = override(config, name, value)
    if args.seed:
        config = replace(config, seeds=tuple(args.seed))
    if args.format:
        config = replace(config, metrics_format=args.format)
    return config


def _ext(fmt: str) -> str:
    return "csv" if fmt == "csv" else "jsonl"


def cmd_train(args) -> int:
    config = _build_config(args)
    out = Path(args.out) if args.out else None
    for seed in config.seeds:
        cfg = config
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            cfg = replace(config, metrics_path=str(out / f"metrics_seed{seed}.{_ext(config.metrics_format)}"))
        result = run_training(cfg, seed)
        if out is not None:
            save_checkpoint(result, out / f"checkpoint_seed{seed}.json")
            (out / f"run_seed{seed}.json").write_text(json.dumps(result.metadata(), indent=2) + "\n")
        elif not config.metrics_path:
            write_records(result.records, sys.stdout, config.metrics_format)
        last = result.records[-1].step if result.records else 0
        print(f"seed {seed}: final eval {result.final_eval:.6g} at step {last}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _build_config(args)
    seed = config.seeds[0]
    envs = make_envs(config, seed)
    policies, _ = load_checkpoint(args.checkpoint, envs)
    mode = args.mode or config.eval_mode
    rng = np.random.default_rng(seed)
    for p, (env, pol) in enumerate(zip(envs, policies)):
        print(f"prompt {p}: {mode} success {evaluate(pol, env, mode, args.samples or config.eval_samples, rng)!r}")
    return EXIT_OK


def _parse_values(text: str) -> list:
    out = []
    for item in text.split(","):
        item = item.strip()
        try:
            out.append(int(item))
        except ValueError:
            try:
                out.append(float(item))
            except ValueError:
                out.append(item)
    return out


def cmd_sweep(args) -> int:
    config = replace(_build_config(args), metrics_path=None, rollout_log=None)
    rows = sweep(config, args.axis, _parse_values(args.values), args.out)
    print(format_summary(rows))
    return EXIT_OK


def verify_fixture(name: str = "appendix-a") -> list[tuple[str, float, float, bool]]:
    env, pol = load_fixture(name)
    return [(label, fn(env, pol), want, abs(fn(env, pol) - want) <= FIXTURE_TOL) for label, fn, want in FIXTURE_CHECKS]


def cmd_fixture(args) -> int:
    if args.action == "dump":
        env, _ = load_fixture(args.name)
        if args.out:
            write_tree(env, args.out)
        else:
            print(json.dumps(env.to_dict(), indent=2))
        return EXIT_OK
    ok = True
    for label, got, want, passed in verify_fixture(args.name):
        ok &= passed
        print(f"{'ok  ' if passed else 'FAIL'} {label:<14} {got!r} (expected {want})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    from .gradcheck import random_gradcheck

    worst = 0.0
    for trial in range(args.trials):
        for stream, report in random_gradcheck(np.random.default_rng([args.seed, trial])).items():
            worst = max(worst, report.max_rel)
            if not report.passed:
                print(f"trial {trial} {stream}: max rel error {report.max_rel:.3e}; offenders {report.offenders[:3]}")
    print(f"{args.trials} batches, worst relative error {worst:.3e} (tolerance 1e-5)")
    return EXIT_OK if worst <= 1e-5 else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pivotlab", description="Pivot-branching GRPO on synthetic trees.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run per seed")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    _add_config_flags(p)
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=("greedy", "sample", "exact"))
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="vary one config field over a list of values")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, help="config field, e.g. lambda, gamma, strategy, extra")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fixture", help="dump or verify a bundled fixture")
    p.add_argument("action", choices=("dump", "verify"))
    p.add_argument("name", nargs="?", default="appendix-a")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("gradcheck", help="finite-difference check on random frozen batches")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PivotLabError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
