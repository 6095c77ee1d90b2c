"""REINFORCE training of the policy network."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import env as vrp_env
from .instance import GENERATORS, InstanceSpec
from .policy import DTYPE, PolicyConfig, PolicyNetwork, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

HOLDOUT_SEED_OFFSET = 0
TRAIN_SEED_LOW = 1_000_000


@dataclass
class FamilyConfig:
    generator: str = "euclidean"
    customer_count: int = 8
    stochastic_fraction: float = 0.0
    horizon: float = 24.0
    request_cutoff: int = 10

    def make(self, seed: int, horizon: Optional[float] = None) -> InstanceSpec:
        gen = GENERATORS[self.generator]
        return gen(self.customer_count, int(seed), self.stochastic_fraction,
                   self.horizon if horizon is None else horizon, self.request_cutoff)

    def holdout(self, count: int, horizon: Optional[float] = None) -> list:
        return [self.make(HOLDOUT_SEED_OFFSET + i, horizon) for i in range(count)]


@dataclass
class TrainingConfig:
    episodes_per_batch: int = 32
    total_batches: int = 500
    learning_rate: float = 1e-3
    optimizer: str = "sgd"               # "sgd" (plain ascent) or "adam"
    discount: float = 1.0
    baseline_mode: str = "none"          # "none" or "moving_average"
    baseline_decay: float = 0.9
    max_grad_norm: Optional[float] = None
    seed: int = 0
    family: FamilyConfig = field(default_factory=FamilyConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    holdout_size: int = 100
    validate_every: int = 0
    checkpoint_every: int = 0
    output_dir: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.family, dict):
            self.family = FamilyConfig(**self.family)
        if isinstance(self.policy, dict):
            self.policy = PolicyConfig.from_dict(self.policy)
        if not 0 < self.discount <= 1:
            raise ValueError(f"discount must be in (0, 1], got {self.discount}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.baseline_mode not in ("none", "moving_average"):
            raise ValueError(f"unknown baseline_mode {self.baseline_mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.episodes_per_batch < 1 or self.total_batches < 0:
            raise ValueError("episodes_per_batch must be >= 1 and total_batches >= 0")

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**payload)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingReport:
    mean_return: list = field(default_factory=list)
    mean_served_pct: list = field(default_factory=list)
    feasibility_rate: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    skipped_batches: list = field(default_factory=list)
    validation: list = field(default_factory=list)    # (batch, greedy served %)
    checkpoints: list = field(default_factory=list)


@dataclass
class StepStats:
    loss: float
    grad_norm: float
    mean_return: float
    applied: bool


class MovingAverageBaseline:
    """Scalar exponential moving average of episode returns."""

    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.value: Optional[float] = None

    def current(self, fallback: float) -> float:
        return fallback if self.value is None else self.value

    def update(self, mean_return: float) -> None:
        if self.value is None:
            self.value = mean_return
        else:
            self.value = self.decay * self.value + (1 - self.decay) * mean_return


def compute_returns(rewards: Sequence[float], discount: float = 1.0) -> np.ndarray:
    """Reward-to-go G_t = sum_{t' >= t} discount^(t'-t) r_t'."""
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


def reinforce_loss(log_probs: Sequence[torch.Tensor], rewards: Sequence[Sequence[float]],
                   discount: float = 1.0, baseline: float = 0.0) -> torch.Tensor:
    """-mean over all steps of (G_t - b) log pi(a_t | s_t); its negative gradient ascends J."""
    terms = []
    for lp, rw in zip(log_probs, rewards):
        g = torch.as_tensor(compute_returns(rw, discount) - baseline, dtype=lp.dtype)
        terms.append(g * lp)
    return -torch.cat(terms).mean()


def policy_gradient_step(log_probs, rewards, params: Sequence[torch.Tensor], config: TrainingConfig,
                         baseline: Optional[MovingAverageBaseline] = None,
                         optimizer: Optional[torch.optim.Optimizer] = None) -> StepStats:
    """One REINFORCE update from a batch of sampled episodes.

    With no optimizer, parameters move by plain gradient ascent on J with the configured rate.
    A non-finite gradient leaves the parameters untouched and reports ``applied=False``.
    """
    params = list(params)
    episode_returns = [float(sum(r * config.discount ** i for i, r in enumerate(rw))) for rw in rewards]
    mean_return = float(np.mean(episode_returns))
    b = 0.0
    if baseline is not None and config.baseline_mode == "moving_average":
        b = baseline.current(mean_return)
    loss = reinforce_loss(log_probs, rewards, config.discount, b)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    norm = float(torch.sqrt(sum((g ** 2).sum() for g in grads)))
    if baseline is not None and config.baseline_mode == "moving_average":
        baseline.update(mean_return)
    if not math.isfinite(norm) or not math.isfinite(float(loss.detach())):
        log.warning("non-finite gradient (norm=%s); batch skipped", norm)
        return StepStats(float(loss.detach()), norm, mean_return, False)
    if config.max_grad_norm is not None and norm > config.max_grad_norm:
        grads = [g * (config.max_grad_norm / norm) for g in grads]
    if optimizer is None:
        with torch.no_grad():
            for p, g in zip(params, grads):
                p -= config.learning_rate * g
    else:
        for p, g in zip(params, grads):
            p.grad = g
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)
    return StepStats(float(loss.detach()), norm, mean_return, True)


def batch_rollout(model: PolicyNetwork, instances: Sequence[InstanceSpec], decode_mode: str = "sample",
                  generator: Optional[torch.Generator] = None, track_grad: bool = True):
    """Run one episode per instance in lockstep; embeddings are computed once per episode.

    All instances must share the node count.  Returns (trajectories, per-episode log-prob tensors).
    """
    grad_ctx = torch.enable_grad() if track_grad else torch.no_grad()
    with grad_ctx:
        h = model.embed(model.network_tensors(instances)).h
        states = [vrp_env.reset(inst) for inst in instances]
        trajs = [vrp_env.Trajectory(customer_count=inst.customer_count) for inst in instances]
        log_probs = [[] for _ in instances]
        limit = max(vrp_env.step_limit(inst) for inst in instances)
        for _ in range(limit):
            live = [i for i, s in enumerate(states) if not s.done]
            if not live:
                break
            masks = [vrp_env.legal_action_mask(states[i]) for i in live]
            vehicle = model.vehicle_batch([states[i] for i in live], masks)
            dist = model.head(h[live], vehicle)
            if decode_mode == "greedy":
                actions = dist.probs.argmax(dim=-1)
            else:
                actions = torch.multinomial(dist.probs.detach(), 1, generator=generator).squeeze(-1)
            chosen = dist.log_probs.gather(1, actions[:, None]).squeeze(-1)
            for j, i in enumerate(live):
                out = vrp_env.step(states[i], int(actions[j]))
                trajs[i].steps.append((states[i].vehicle, int(actions[j]), out.reward))
                log_probs[i].append(chosen[j])
                states[i] = out.next_state
        else:
            if any(not s.done for s in states):
                raise vrp_env.EnvError("batched episode exceeded the step limit")
    trajs = [vrp_env.finish(t, s) for t, s in zip(trajs, states)]
    return trajs, [torch.stack(lp) for lp in log_probs]


def greedy_served(model: PolicyNetwork, instances: Sequence[InstanceSpec], chunk: int = 128) -> list:
    """Greedy-decode each instance; returns the served counts."""
    served = []
    for start in range(0, len(instances), chunk):
        part = instances[start:start + chunk]
        by_size = {}
        for idx, inst in enumerate(part):
            by_size.setdefault(inst.network.node_count, []).append(idx)
        out = [0] * len(part)
        for idxs in by_size.values():
            trajs, _ = batch_rollout(model, [part[i] for i in idxs], "greedy", track_grad=False)
            for i, t in zip(idxs, trajs):
                out[i] = t.served_count
        served += out
    return served


def _rng_state(rng: np.random.Generator, gen: torch.Generator) -> dict:
    return {"numpy": rng.bit_generator.state, "torch": gen.get_state()}


def train(config: TrainingConfig, resume_from=None, progress=None) -> tuple[TrainingReport, PolicyNetwork]:
    """Train from scratch (or resume a checkpoint written by this function)."""
    torch_gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = PolicyNetwork(config.policy)
    report = TrainingReport()
    baseline = MovingAverageBaseline(config.baseline_decay)
    params = [p for p in model.parameters()]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate) if config.optimizer == "adam" else None
    start = 0
    if resume_from is not None:
        model, extra = load_checkpoint(resume_from, config.policy)
        params = [p for p in model.parameters()]
        if optimizer is not None:
            optimizer = torch.optim.Adam(params, lr=config.learning_rate)
            optimizer.load_state_dict(extra["optimizer"])
        start = extra["batch"]
        rng.bit_generator.state = extra["rng"]["numpy"]
        torch_gen.set_state(extra["rng"]["torch"])
        baseline.value = extra["baseline"]
        report = TrainingReport(**extra["report"])

    out_dir = Path(config.output_dir) if config.output_dir else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "a")
    holdout = config.family.holdout(config.holdout_size) if config.validate_every else []
    try:
        for batch in range(start, config.total_batches):
            t0 = time.perf_counter()
            seeds = rng.integers(TRAIN_SEED_LOW, 2 ** 31 - 1, size=config.episodes_per_batch)
            instances = [config.family.make(s) for s in seeds]
            trajs, log_probs = batch_rollout(model, instances, "sample", torch_gen)
            stats = policy_gradient_step(log_probs, [t.rewards for t in trajs], params, config,
                                         baseline, optimizer)
            report.mean_return.append(stats.mean_return)
            report.mean_served_pct.append(float(np.mean([t.served_pct for t in trajs])))
            report.feasibility_rate.append(float(np.mean([t.feasible for t in trajs])))
            report.grad_norm.append(stats.grad_norm)
            report.seconds.append(time.perf_counter() - t0)
            if not stats.applied:
                report.skipped_batches.append(batch)
            record = {"batch": batch, "mean_return": stats.mean_return,
                      "served_pct": report.mean_served_pct[-1], "grad_norm": stats.grad_norm,
                      "seconds": report.seconds[-1]}
            if config.validate_every and (batch + 1) % config.validate_every == 0:
                served = greedy_served(model, holdout)
                pct = 100.0 * float(np.mean(served)) / config.family.customer_count
                report.validation.append((batch + 1, pct))
                record["val_served_pct"] = pct
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            if progress is not None:
                progress(record)
            if out_dir is not None and config.checkpoint_every and (batch + 1) % config.checkpoint_every == 0:
                path = out_dir / f"checkpoint_{batch + 1:06d}.pt"
                save_checkpoint(model, path, _resume_extra(batch + 1, config, rng, torch_gen,
                                                           baseline, optimizer, report))
                report.checkpoints.append(str(path))
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        path = out_dir / "final.pt"
        save_checkpoint(model, path, _resume_extra(config.total_batches, config, rng, torch_gen,
                                                   baseline, optimizer, report))
        report.checkpoints.append(str(path))
    return report, model


def _resume_extra(batch, config, rng, torch_gen, baseline, optimizer, report) -> dict:
    return {
        "batch": batch,
        "training_config": config.to_dict(),
        "rng": _rng_state(rng, torch_gen),
        "baseline": baseline.value,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "report": asdict(report),
    }
