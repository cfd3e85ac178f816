"""Command-line entry point: gen, train, eval, solve, validate and gantt."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .baselines import RULES, dispatch_solve, exact_solve
from .core import DomainError, makespan, validate_schedule
from .instances import (
    GenConfig,
    ParseError,
    emit_fjs_text,
    generate_sd,
    load_instance,
    parse_schedule,
    serialize_instance,
    serialize_schedule,
)
from .ppo import CheckpointError, PPOConfig, TrainingError, save_checkpoint, train
from .report import DEFAULT_SAMPLES, emit_gantt, evaluate_dataset
from .representation import ScaleConfig

EXACT_MAX_OPS = 10
EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rela", description="Flexible job-shop scheduling with a learned dispatcher.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic instances")
    p.add_argument("--scheme", required=True, type=str.upper, choices=["SD1", "SD2"])
    p.add_argument("--jobs", type=int, required=True)
    p.add_argument("--machines", type=int, required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["json", "fjs"], default="json")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a policy with PPO")
    p.add_argument("--scheme", required=True, type=str.upper, choices=["SD1", "SD2"])
    p.add_argument("--jobs", type=int, required=True)
    p.add_argument("--machines", type=int, required=True)
    p.add_argument("--config", type=Path, help="JSON file with PPOConfig fields")
    p.add_argument("--episodes", type=int)
    p.add_argument("--envs-per-batch", type=int)
    p.add_argument("--val-size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scales", default="32,8", help="comma-separated scale widths")
    p.add_argument("--op-graph", choices=["chain", "complete"], default="chain")
    for flag in ("attn", "conv", "cattn", "deep-supervision"):
        p.add_argument(f"--no-{flag}", action="store_true")
    p.add_argument("--out", type=Path, required=True, help="best-validation checkpoint; the final one goes next to it as <name>.final.json")
    p.add_argument("--log", type=Path, help="JSONL training curve")

    p = sub.add_parser("eval", help="evaluate checkpoints on a dataset directory")
    p.add_argument("--checkpoint", type=Path, nargs="+", required=True, help="one checkpoint per training seed")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--mode", choices=["greedy", "sampling"], default="greedy")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reference", type=Path, help="JSON map of instance name to reference makespan")
    p.add_argument("--jsonl", type=Path, help="write line-delimited records here")

    p = sub.add_parser("solve", help="solve one instance with a baseline")
    p.add_argument("--instance", type=Path, required=True)
    p.add_argument("--algo", required=True, help="'exact' or 'rule:<SPT|FIFO-SPT|MWKR-SPT|RANDOM>'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--node-limit", type=int, default=2_000_000)
    p.add_argument("--force", action="store_true", help="run the exact solver on large instances")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("validate", help="check a schedule against an instance")
    p.add_argument("--instance", type=Path, required=True)
    p.add_argument("--schedule", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")

    p = sub.add_parser("gantt", help="draw a schedule as SVG")
    p.add_argument("--instance", type=Path, required=True)
    p.add_argument("--schedule", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    return parser


class UsageError(Exception):
    pass


def cmd_gen(args) -> int:
    gen = GenConfig(args.scheme, args.jobs, args.machines, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        inst = generate_sd(gen, k)
        if args.format == "json":
            (args.out / f"{args.scheme.lower()}_{k:04d}.json").write_bytes(serialize_instance(inst))
        else:
            (args.out / f"{args.scheme.lower()}_{k:04d}.fjs").write_bytes(emit_fjs_text(inst))
    print(f"wrote {args.count} instances to {args.out}")
    return EXIT_OK


def final_checkpoint_path(best: Path) -> Path:
    return best.with_name(best.stem + ".final" + (best.suffix or ".json"))


def cmd_train(args) -> int:
    overrides = {"seed": args.seed}
    for name in ("episodes", "envs_per_batch", "val_size"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    if args.config:
        cfg = PPOConfig.from_file(args.config)
        cfg = PPOConfig(**{**cfg.__dict__, **overrides})
    else:
        cfg = PPOConfig.for_scheme(args.scheme, **overrides)
    try:
        dims = tuple(int(x) for x in args.scales.split(","))
    except ValueError as exc:
        raise UsageError(f"--scales must be comma-separated integers: {exc}") from exc
    net_cfg = ScaleConfig(
        scale_dims=dims,
        attn=not args.no_attn,
        conv=not args.no_conv,
        cattn=not args.no_cattn,
        deep_supervision=not args.no_deep_supervision,
        op_graph=args.op_graph,
    )
    result = train(args.scheme, args.jobs, args.machines, cfg, net_cfg, log_path=args.log)
    meta = {"scheme": args.scheme, "jobs": args.jobs, "machines": args.machines, "best_val": result.best_val, "ppo": cfg.__dict__}
    save_checkpoint(result.best, args.out, meta)
    final_path = final_checkpoint_path(args.out)
    save_checkpoint(result.final, final_path, meta)
    print(f"best validation makespan {result.best_val:.3f}; checkpoints written to {args.out} and {final_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    reference = json.loads(args.reference.read_text()) if args.reference else None
    report = evaluate_dataset(args.checkpoint, args.dataset, args.mode, args.samples, args.seed, reference)
    sys.stdout.write(report.to_table())
    if args.jsonl:
        args.jsonl.write_text(report.to_jsonl())
    return EXIT_OK


def cmd_solve(args) -> int:
    inst = load_instance(args.instance)
    if args.algo == "exact":
        if inst.n_operations > EXACT_MAX_OPS and not args.force:
            raise DomainError(
                f"instance has {inst.n_operations} operations; the exact solver is meant for at most "
                f"{EXACT_MAX_OPS}. Pass --force to run it anyway or use --algo rule:<name>."
            )
        sched, optimal = exact_solve(inst, args.node_limit)
        status = "optimal" if optimal else "node limit reached, best found"
    elif args.algo.startswith("rule:"):
        rule = args.algo[5:].upper()
        if rule not in RULES:
            raise UsageError(f"unknown rule {rule!r}; choose from {', '.join(RULES)}")
        sched = dispatch_solve(inst, rule, np.random.default_rng(args.seed))
        status = rule
    else:
        raise UsageError(f"--algo must be 'exact' or 'rule:<name>', got {args.algo!r}")
    print(f"makespan {makespan(sched)} ({status})")
    if args.out:
        args.out.write_bytes(serialize_schedule(sched))
    return EXIT_OK


def cmd_validate(args) -> int:
    inst = load_instance(args.instance)
    sched = parse_schedule(args.schedule.read_bytes())
    problems = validate_schedule(inst, sched)
    if problems:
        for msg in problems:
            print(msg)
        return EXIT_DOMAIN
    print(f"feasible; makespan {makespan(sched)}")
    return EXIT_OK


def cmd_gantt(args) -> int:
    inst = load_instance(args.instance)
    sched = parse_schedule(args.schedule.read_bytes())
    doc = emit_gantt(inst, sched)
    args.out.write_text(doc.svg)
    print(f"wrote {len(doc.rects)} bars to {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "solve": cmd_solve,
    "validate": cmd_validate,
    "gantt": cmd_gantt,
}


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, ParseError, CheckpointError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
