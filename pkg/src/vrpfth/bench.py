"""Experiment harness: solver benchmarks, horizon sweeps and the ablation table.

Raw per-instance records are deterministic given the config, so two identical runs write
byte-identical ``records.jsonl``.  Wall-clock numbers live in a separate ``timings.jsonl``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import torch
from scipy import stats

from . import baselines
from . import env as vrp_env
from .policy import load_checkpoint
from .reinforce import FamilyConfig, TrainingConfig, train

log = logging.getLogger(__name__)

SOLVERS = ("oracle", "greedy", "random", "ga", "vns", "rl")
DETERMINISTIC_ONLY = ("ga", "vns")
ABLATION_VARIANTS = {
    "full": {},
    "no_edge_features": {"use_edge_features": False},
    "no_global_embedding": {"use_global_embedding": False},
    "no_horizon_in_embedding": {"use_horizon_in_embedding": False},
}


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass
class ExperimentConfig:
    family: FamilyConfig = field(default_factory=FamilyConfig)
    sizes: list = field(default_factory=lambda: [8])
    seeds: list = field(default_factory=lambda: list(range(10)))
    solvers: list = field(default_factory=lambda: ["greedy"])
    checkpoint: Optional[str] = None
    decode_mode: str = "greedy"
    horizons: list = field(default_factory=list)
    ablation_checkpoints: dict = field(default_factory=dict)
    output_dir: Optional[str] = None
    repetitions: int = 1
    ga_population: int = 100
    ga_generations: int = 1000
    vns_iterations: int = 100
    plot: bool = False

    def __post_init__(self):
        if isinstance(self.family, dict):
            self.family = FamilyConfig(**self.family)
        self.sizes = [int(s) for s in self.sizes]
        self.seeds = [int(s) for s in self.seeds]

    def validate(self) -> None:
        if not self.solvers:
            raise ConfigError("at least one solver is required")
        unknown = [s for s in self.solvers if s not in SOLVERS]
        if unknown:
            raise ConfigError(f"unknown solvers {unknown}; choose from {list(SOLVERS)}")
        if not self.seeds or not self.sizes or min(self.sizes) < 1:
            raise ConfigError("need at least one instance seed and positive sizes")
        if self.decode_mode not in ("greedy", "sample"):
            raise ConfigError(f"unknown decode mode {self.decode_mode!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if "rl" in self.solvers:
            if not self.checkpoint:
                raise ConfigError("solver 'rl' needs a checkpoint")
            if not Path(self.checkpoint).is_file():
                raise ConfigError(f"checkpoint not found: {self.checkpoint}")

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class ResultRow:
    solver: str
    family: str
    size: int
    mean_served_pct: float
    std_served_pct: float
    mean_seconds: float
    feasibility_rate: float
    n: int
    ci95: Optional[tuple] = None


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    failures: int = 0

    def row(self, solver: str, size: Optional[int] = None) -> ResultRow:
        for r in self.rows:
            if r.solver == solver and (size is None or r.size == size):
                return r
        raise KeyError((solver, size))

    def to_records(self) -> list:
        out = []
        for r in self.rows:
            rec = asdict(r)
            rec["ci95"] = list(r.ci95) if r.ci95 is not None else None
            out.append(rec)
        return out

    def format(self) -> str:
        head = f"{'solver':<26}{'family':<11}{'size':>5}{'served %':>10}{'std':>8}{'95% CI':>18}" \
               f"{'time s':>10}{'feas':>7}{'n':>5}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            ci = f"[{r.ci95[0]:.1f}, {r.ci95[1]:.1f}]" if r.ci95 else ""
            lines.append(f"{r.solver:<26}{r.family:<11}{r.size:>5}{r.mean_served_pct:>10.2f}"
                         f"{r.std_served_pct:>8.2f}{ci:>18}{r.mean_seconds:>10.4f}"
                         f"{r.feasibility_rate:>7.2f}{r.n:>5}")
        return "\n".join(lines)


RECORD_SCHEMA = {
    "type": "object",
    "required": ["solver", "family", "size", "seed", "rep", "horizon", "status"],
    "properties": {
        "solver": {"type": "string"},
        "family": {"type": "string"},
        "size": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "rep": {"type": "integer", "minimum": 0},
        "horizon": {"type": "number", "exclusiveMinimum": 0},
        "status": {"enum": ["ok", "error"]},
        "route": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "served": {"type": "integer", "minimum": 0},
        "customers": {"type": "integer", "minimum": 1},
        "served_pct": {"type": "number", "minimum": 0, "maximum": 100},
        "travel_hours": {"type": "number", "minimum": 0},
        "feasible": {"type": "boolean"},
        "error": {"type": "string"},
    },
}
TIMING_SCHEMA = {
    "type": "object",
    "required": ["solver", "size", "seed", "rep", "horizon", "seconds"],
    "properties": {"seconds": {"type": "number", "minimum": 0}},
}
TABLE_SCHEMA = {
    "type": "object",
    "required": ["rows", "failures"],
    "properties": {
        "failures": {"type": "integer", "minimum": 0},
        "rows": {"type": "array", "items": {
            "type": "object",
            "required": ["solver", "family", "size", "mean_served_pct", "std_served_pct",
                         "mean_seconds", "feasibility_rate", "n"],
            "properties": {
                "mean_served_pct": {"type": "number", "minimum": 0, "maximum": 100},
                "feasibility_rate": {"type": "number", "minimum": 0, "maximum": 1},
                "n": {"type": "integer", "minimum": 1},
            },
        }},
    },
}


def _solve(name, inst, seed, rep, config, model):
    """Returns (route, served, feasible) for one solver call."""
    if name == "oracle":
        res = baselines.oracle_exact(inst)
    elif name == "greedy":
        res = baselines.greedy_nearest_feasible(inst)
    elif name == "random":
        res = baselines.random_policy_solve(inst, seed * 1000 + rep)
    elif name == "ga":
        res = baselines.ga_solve(inst, config.ga_population, config.ga_generations, seed=seed * 1000 + rep)
    elif name == "vns":
        res = baselines.vns_solve(inst, config.vns_iterations, seed=seed * 1000 + rep)
    else:
        traj = vrp_env.rollout(inst, model.as_policy(), config.decode_mode, seed * 1000 + rep)
        return list(traj.route), traj.served_count, traj.feasible
    return list(res.route), res.served_count, res.feasible


def _solve_record(name, inst, seed, rep, config, model) -> tuple[dict, float]:
    base = {"solver": name, "family": config.family.generator, "size": inst.customer_count,
            "seed": seed, "rep": rep, "horizon": inst.horizon}
    t0 = time.perf_counter()
    try:
        route, served, feasible = _solve(name, inst, seed, rep, config, model)
    except Exception as exc:   # recorded and counted; the run carries on
        log.error("%s failed on seed %d: %s", name, seed, exc)
        return dict(base, status="error", error=f"{type(exc).__name__}: {exc}"), time.perf_counter() - t0
    seconds = time.perf_counter() - t0
    if len(route) > 2 and route[0] == route[1]:   # drop a depot wait at the first step
        route = route[1:]
    ok, verified, travel = baselines.verify_route(inst, route)
    record = dict(base, status="ok", route=[int(v) for v in route], served=int(served),
                  customers=inst.customer_count, served_pct=100.0 * served / inst.customer_count,
                  travel_hours=round(travel, 6), feasible=bool(feasible and ok and verified == served))
    return record, seconds


def _summarize(records: list, timings: list, ci: bool = False) -> ResultTable:
    table = ResultTable(failures=sum(r["status"] == "error" for r in records))
    groups: dict = {}
    for rec, tim in zip(records, timings):
        if rec["status"] == "ok":
            groups.setdefault((rec["solver"], rec["family"], rec["size"]), []).append((rec, tim["seconds"]))
    for (solver, family, size), items in groups.items():
        pct = np.array([r["served_pct"] for r, _ in items])
        interval = None
        if ci and len(pct) > 1:
            half = stats.t.ppf(0.975, len(pct) - 1) * pct.std(ddof=1) / math.sqrt(len(pct))
            interval = (float(pct.mean() - half), float(pct.mean() + half))
        table.rows.append(ResultRow(solver, family, int(size), float(pct.mean()), float(pct.std()),
                                    float(np.mean([s for _, s in items])),
                                    float(np.mean([r["feasible"] for r, _ in items])), len(items),
                                    interval))
    return table


def check_rederivable(table: ResultTable, records: list) -> None:
    """Recompute every row's served % from the raw routes; raise if anything disagrees."""
    for row in table.rows:
        rows = [r for r in records if r["status"] == "ok" and r["solver"] == row.solver
                and r["family"] == row.family and r["size"] == row.size]
        pct = []
        for r in rows:
            served = len({v for v in r["route"] if v != r["route"][0]})
            if served != r["served"]:
                raise AssertionError(f"{row.solver} seed {r['seed']}: route serves {served}, "
                                     f"record says {r['served']}")
            pct.append(100.0 * served / r["customers"])
        if len(pct) != row.n or float(np.mean(pct)) != row.mean_served_pct:
            raise AssertionError(f"{row.solver}/{row.size}: served % not re-derivable from records")


def _write_outputs(out_dir: Path, records: list, timings: list, table: ResultTable, prefix: str = "") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        jsonschema.validate(rec, RECORD_SCHEMA)
    for tim in timings:
        jsonschema.validate(tim, TIMING_SCHEMA)
    table_json = {"rows": table.to_records(), "failures": table.failures}
    jsonschema.validate(table_json, TABLE_SCHEMA)
    with open(out_dir / f"{prefix}records.jsonl", "w") as fh:
        fh.writelines(json.dumps(r, sort_keys=True) + "\n" for r in records)
    with open(out_dir / f"{prefix}timings.jsonl", "w") as fh:
        fh.writelines(json.dumps(t, sort_keys=True) + "\n" for t in timings)
    (out_dir / f"{prefix}table.json").write_text(json.dumps(table_json, indent=1, sort_keys=True) + "\n")
    (out_dir / f"{prefix}table.txt").write_text(table.format() + "\n")


def _instances(config: ExperimentConfig, size: int, horizon: Optional[float] = None):
    fam = FamilyConfig(**dict(asdict(config.family), customer_count=size))
    return [(seed, fam.make(seed, horizon)) for seed in config.seeds]


def run_experiment(config: ExperimentConfig, horizon: Optional[float] = None,
                   write: bool = True, ci: bool = False) -> tuple[ResultTable, list, list]:
    """Evaluate every configured solver on every instance.  Returns (table, records, timings)."""
    config.validate()
    torch.set_num_threads(1)
    model = load_checkpoint(config.checkpoint)[0] if "rl" in config.solvers else None
    records, timings = [], []
    for size in config.sizes:
        for seed, inst in _instances(config, size, horizon):
            for name in config.solvers:
                if name in DETERMINISTIC_ONLY and not inst.is_deterministic:
                    continue
                for rep in range(config.repetitions):
                    rec, seconds = _solve_record(name, inst, seed, rep, config, model)
                    records.append(rec)
                    timings.append({k: rec[k] for k in ("solver", "size", "seed", "rep", "horizon")}
                                   | {"seconds": seconds})
    table = _summarize(records, timings, ci)
    check_rederivable(table, records)
    if write and config.output_dir:
        _write_outputs(Path(config.output_dir), records, timings, table)
    return table, records, timings


def horizon_sweep(config: ExperimentConfig) -> dict:
    """Re-run the experiment at each horizon on the same seeds.  Returns {U: ResultTable}."""
    horizons = [float(u) for u in config.horizons]
    if not horizons or any(b <= a for a, b in zip(horizons, horizons[1:])):
        raise ConfigError(f"horizons must be non-empty and strictly increasing, got {horizons}")
    tables, series = {}, []
    all_records, all_timings = [], []
    for u in horizons:
        table, records, timings = run_experiment(config, horizon=u, write=False)
        tables[u] = table
        all_records += records
        all_timings += timings
        series += [(u, row.mean_served_pct, row.solver) for row in table.rows]
    if config.output_dir:
        out = Path(config.output_dir)
        merged = ResultTable([r for t in tables.values() for r in t.rows],
                             sum(t.failures for t in tables.values()))
        _write_outputs(out, all_records, all_timings, merged, "sweep_")
        with open(out / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["U", "served_pct", "solver"])
            writer.writerows(series)
        if config.plot:
            plot_sweep(series, out / "sweep.png")
    return tables


def plot_sweep(series: list, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for solver in dict.fromkeys(s for _, _, s in series):
        pts = [(u, y) for u, y, s in series if s == solver]
        ax.plot(*zip(*pts), marker="o", label=solver)
    ax.set_xlabel("time horizon U (h)")
    ax.set_ylabel("customers served (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_suite(config: ExperimentConfig) -> tuple[ResultTable, dict]:
    """Greedy-decode the four model variants on one shared suite.

    Returns the four-row table (with 95% t-intervals) and a manifest holding the shared
    seeds and each variant's config hash.
    """
    missing = [v for v in ABLATION_VARIANTS if v not in config.ablation_checkpoints]
    if missing:
        raise ConfigError(f"no checkpoint given for ablation variant(s): {', '.join(missing)}")
    for variant in ABLATION_VARIANTS:
        path = config.ablation_checkpoints[variant]
        if not Path(path).is_file():
            raise ConfigError(f"checkpoint for ablation variant '{variant}' not found: {path}")
    rows, records, timings = [], [], []
    manifest = {"seeds": list(config.seeds), "sizes": list(config.sizes),
                "family": asdict(config.family), "variants": {}}
    for variant in ABLATION_VARIANTS:
        path = config.ablation_checkpoints[variant]
        model, _ = load_checkpoint(path)
        manifest["variants"][variant] = {"checkpoint": str(path), "config_hash": model.config.digest()}
        sub = ExperimentConfig(**dict(config.to_dict(), solvers=["rl"], checkpoint=str(path),
                                      decode_mode="greedy", output_dir=None))
        table, recs, tims = run_experiment(sub, ci=True, write=False)
        for r in recs + tims:
            r["solver"] = variant
        for row in table.rows:
            row.solver = variant
        rows += table.rows
        records += recs
        timings += tims
    table = ResultTable(rows, sum(r["status"] == "error" for r in records))
    check_rederivable(table, records)
    full = table.row("full").mean_served_pct
    manifest["full_config_hash"] = manifest["variants"]["full"]["config_hash"]
    manifest["full_at_least"] = {r.solver: full >= r.mean_served_pct for r in rows if r.solver != "full"}
    if config.output_dir:
        out = Path(config.output_dir)
        _write_outputs(out, records, timings, table, "ablation_")
        (out / "ablation_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    log.info("ablation (full config %s):\n%s", manifest["full_config_hash"], table.format())
    return table, manifest


def train_ablation_variants(base: TrainingConfig, out_dir, progress=None) -> dict:
    """Train the four variants with identical seeds and budget; returns {variant: final checkpoint}."""
    paths = {}
    for variant, flags in ABLATION_VARIANTS.items():
        policy = dict(asdict(base.policy), **flags)
        cfg = TrainingConfig(**dict(base.to_dict(), policy=policy, output_dir=str(Path(out_dir) / variant)))
        train(cfg, progress=progress)
        paths[variant] = str(Path(out_dir) / variant / "final.pt")
    return paths
