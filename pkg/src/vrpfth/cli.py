"""Command-line entry point: ``vrpfth <subcommand>``.

Exit codes: 0 success, 1 a solver or training step failed, 2 bad configuration or input.
Relative output directories are resolved under ``$VRPFTH_OUTPUT`` (default ``runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench
from .instance import GENERATORS, InstanceError, load_instance, save_instance
from .policy import CheckpointError
from .reinforce import FamilyConfig, TrainingConfig, train

OUTPUT_ENV = "VRPFTH_OUTPUT"
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("vrpfth")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def resolve_output(path, default: str) -> str:
    p = Path(path) if path else Path(default)
    return str(p if p.is_absolute() else output_root() / p)


def load_config_file(path) -> dict:
    if not path:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise bench.ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise bench.ConfigError(f"config {path} must hold a JSON object")
    return payload


def _family_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("instance family")
    g.add_argument("--family", dest="generator", choices=sorted(GENERATORS))
    g.add_argument("--customers", dest="customer_count", type=int)
    g.add_argument("--stochastic-fraction", type=float)
    g.add_argument("--horizon", type=float, help="time horizon U in hours")
    g.add_argument("--cutoff", dest="request_cutoff", type=int, help="request cutoff step K")


def _family_overrides(args) -> dict:
    keys = ("generator", "customer_count", "stochastic_fraction", "horizon", "request_cutoff")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _merge_family(base: dict, args) -> dict:
    fam = dict(base.get("family", {}))
    fam.update(_family_overrides(args))
    return fam


def _seed_list(args, base: dict):
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    if args.count is not None:
        return list(range(args.seed_offset, args.seed_offset + args.count))
    return base.get("seeds", list(range(10)))


def _experiment_flags(p: argparse.ArgumentParser, solvers=True) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override its fields")
    _family_flags(p)
    p.add_argument("--sizes", help="comma-separated customer counts")
    p.add_argument("--seeds", help="comma-separated instance seeds")
    p.add_argument("--count", type=int, help="number of instances (seeds offset..offset+count-1)")
    p.add_argument("--seed-offset", type=int, default=0)
    if solvers:
        p.add_argument("--solvers", help=f"comma-separated subset of {','.join(bench.SOLVERS)}")
    p.add_argument("--checkpoint")
    p.add_argument("--decode-mode", choices=["greedy", "sample"])
    p.add_argument("--repetitions", type=int)
    p.add_argument("--ga-generations", type=int)
    p.add_argument("--ga-population", type=int)
    p.add_argument("--vns-iterations", type=int)
    p.add_argument("--output-dir")


def experiment_config(args, command: str, **forced) -> bench.ExperimentConfig:
    base = load_config_file(args.config)
    payload = dict(base)
    payload["family"] = _merge_family(base, args)
    payload["seeds"] = _seed_list(args, base)
    if args.sizes:
        payload["sizes"] = [int(s) for s in args.sizes.split(",")]
    elif "sizes" not in base and "customer_count" in payload["family"]:
        payload["sizes"] = [payload["family"]["customer_count"]]
    if getattr(args, "solvers", None):
        payload["solvers"] = args.solvers.split(",")
    for key in ("checkpoint", "decode_mode", "repetitions", "ga_generations", "ga_population",
                "vns_iterations"):
        if getattr(args, key, None) is not None:
            payload[key] = getattr(args, key)
    payload.update(forced)
    payload["output_dir"] = resolve_output(args.output_dir or base.get("output_dir"), command)
    return bench.ExperimentConfig.from_dict(payload)


def cmd_gen(args) -> int:
    fam = FamilyConfig(**_family_overrides(args))
    if fam.generator not in GENERATORS:
        raise bench.ConfigError(f"unknown family {fam.generator!r}")
    out = Path(resolve_output(args.output_dir, "instances"))
    for seed in range(args.seed, args.seed + args.count):
        inst = fam.make(seed)
        path = out / f"{fam.generator}-{fam.customer_count}-s{seed}.json"
        save_instance(inst, path)
        print(path)
    return EXIT_OK


def cmd_inspect(args) -> int:
    inst = load_instance(args.path)
    t = inst.network.travel_time
    off = t[~np.eye(len(t), dtype=bool)]
    info = {
        "family": inst.family, "seed": inst.seed, "U": inst.horizon, "K": inst.request_cutoff,
        "nodes": inst.network.node_count, "customers": inst.customer_count,
        "deterministic": len(inst.deterministic_customers),
        "stochastic": len(inst.stochastic_arrivals),
        "travel_time_min": float(off.min()) if off.size else 0.0,
        "travel_time_max": float(off.max()) if off.size else 0.0,
        "symmetric": bool(np.array_equal(t, t.T)),
    }
    print(json.dumps(info, indent=1))
    return EXIT_OK


TRAIN_FLAGS = ("episodes_per_batch", "total_batches", "learning_rate", "optimizer", "discount",
               "baseline_mode", "baseline_decay", "max_grad_norm", "seed", "holdout_size",
               "validate_every", "checkpoint_every")


def training_config(args) -> TrainingConfig:
    base = load_config_file(args.config)
    payload = dict(base)
    for key in TRAIN_FLAGS:
        if getattr(args, key) is not None:
            payload[key] = getattr(args, key)
    payload["family"] = _merge_family(base, args)
    policy = dict(base.get("policy", {}))
    for flag in ("use_edge_features", "use_global_embedding", "use_horizon_in_embedding"):
        if getattr(args, flag) is not None:
            policy[flag] = getattr(args, flag)
    for key in ("pad_to", "k_neighbors"):
        if getattr(args, key) is not None:
            policy[key] = getattr(args, key)
    payload["policy"] = policy
    payload["output_dir"] = resolve_output(args.output_dir or base.get("output_dir"), "train")
    try:
        return TrainingConfig.from_dict(payload)
    except (TypeError, ValueError) as exc:
        raise bench.ConfigError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = training_config(args)

    def progress(rec):
        if rec["batch"] % args.log_every == 0 or "val_served_pct" in rec:
            log.info("batch %(batch)d  return %(mean_return).3f  served %(served_pct).1f%%", rec)

    report, _ = train(cfg, resume_from=args.resume, progress=progress)
    print(json.dumps({"output_dir": cfg.output_dir, "checkpoints": report.checkpoints,
                      "final_mean_return": report.mean_return[-1] if report.mean_return else None,
                      "skipped_batches": report.skipped_batches}, indent=1))
    return EXIT_OK


def _report(table: bench.ResultTable, out_dir) -> int:
    print(table.format())
    print(f"outputs in {out_dir}")
    return EXIT_FAILURE if table.failures else EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise bench.ConfigError("eval needs --checkpoint")
    cfg = experiment_config(args, "eval", solvers=["rl"])
    table, _, _ = bench.run_experiment(cfg)
    return _report(table, cfg.output_dir)


def cmd_bench(args) -> int:
    cfg = experiment_config(args, "bench")
    table, _, _ = bench.run_experiment(cfg)
    return _report(table, cfg.output_dir)


def cmd_sweep(args) -> int:
    forced = {"plot": True} if args.plot else {}
    if args.horizons:
        forced["horizons"] = [float(u) for u in args.horizons.split(",")]
    cfg = experiment_config(args, "sweep", **forced)
    tables = bench.horizon_sweep(cfg)
    failures = 0
    for u, table in tables.items():
        print(f"U = {u:g} h")
        print(table.format())
        failures += table.failures
    print(f"plot data in {Path(cfg.output_dir) / 'sweep.csv'}")
    return EXIT_FAILURE if failures else EXIT_OK


def cmd_ablate(args) -> int:
    checkpoints = {}
    if args.checkpoint_dir:
        checkpoints = {v: str(Path(args.checkpoint_dir) / v / "final.pt") for v in bench.ABLATION_VARIANTS}
    for item in args.variant or []:
        name, _, path = item.partition("=")
        if name not in bench.ABLATION_VARIANTS or not path:
            raise bench.ConfigError(f"--variant expects NAME=PATH with NAME in {list(bench.ABLATION_VARIANTS)}")
        checkpoints[name] = path
    cfg = experiment_config(args, "ablation", solvers=["rl"], ablation_checkpoints=checkpoints)
    table, manifest = bench.ablation_suite(cfg)
    print(table.format())
    print(f"full-model config hash {manifest['full_config_hash']}; seeds {manifest['seeds']}")
    return EXIT_FAILURE if table.failures else EXIT_OK


def _tristate(p, name, help_text):
    p.add_argument(f"--no-{name.replace('_', '-')}", dest=f"use_{name}", action="store_false",
                   default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vrpfth", description="Finite-horizon routing: RL policy and baselines")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate instance files")
    _family_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("inspect", help="validate an instance file and print a summary")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="train a policy with REINFORCE")
    p.add_argument("--config", help="JSON training config; flags override its fields")
    p.add_argument("--episodes-per-batch", type=int)
    p.add_argument("--total-batches", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--discount", type=float)
    p.add_argument("--baseline-mode", choices=["none", "moving_average"])
    p.add_argument("--baseline-decay", type=float)
    p.add_argument("--max-grad-norm", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout-size", type=int)
    p.add_argument("--validate-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--pad-to", type=int)
    p.add_argument("--k-neighbors", type=int, help="neighbours per node in the attention graph")
    _tristate(p, "edge_features", "replace edge features with ones")
    _tristate(p, "global_embedding", "drop the global graph embedding from the context")
    _tristate(p, "horizon_in_embedding", "drop the remaining horizon from the vehicle encoding")
    _family_flags(p)
    p.add_argument("--output-dir")
    p.add_argument("--resume", help="checkpoint written by a previous train run")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy/sample decode a checkpoint on a held-out suite")
    _experiment_flags(p, solvers=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run solvers on an instance suite")
    _experiment_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep-horizon", help="served %% against the time horizon")
    _experiment_flags(p)
    p.add_argument("--horizons", help="comma-separated, strictly increasing U values")
    p.add_argument("--plot", action="store_true", help="also render sweep.png (needs matplotlib)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="compare the full model against its three ablations")
    _experiment_flags(p, solvers=False)
    p.add_argument("--checkpoint-dir", help="directory holding <variant>/final.pt")
    p.add_argument("--variant", action="append", help="NAME=PATH, repeatable")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (bench.ConfigError, InstanceError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.exception("run failed")
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
