import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from vrpfth.instance import InstanceSpec, RoutingNetwork


def make_instance(travel_time, horizon=24.0, stochastic=None, cutoff=10, coords=None):
    t = np.asarray(travel_time, dtype=float)
    net = RoutingNetwork(t, 0, coords)
    stochastic = stochastic or {}
    det = frozenset(net.customers) - set(stochastic)
    return InstanceSpec(net, horizon, det, stochastic, cutoff)


def line_instance(positions, horizon=24.0, **kw):
    """Nodes on a line at the given positions (depot first); travel time = |difference|."""
    p = np.asarray(positions, dtype=float)
    t = np.abs(p[:, None] - p[None, :])
    return make_instance(t, horizon, coords=np.stack([p, np.zeros_like(p)], 1), **kw)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def ten_customer_suite():
    """Oracle, GA and VNS on 20 deterministic 10-customer instances (shared; GA is slow)."""
    from vrpfth.baselines import ga_solve, oracle_exact, vns_solve
    from vrpfth.instance import generate_euclidean

    out = {"oracle": [], "ga": [], "vns": [], "ga_seconds": [], "instances": []}
    for seed in range(20):
        inst = generate_euclidean(10, seed)
        ga = ga_solve(inst, seed=seed)
        out["instances"].append(inst)
        out["oracle"].append(oracle_exact(inst).served_count)
        out["ga"].append(ga.served_count)
        out["ga_seconds"].append(ga.solve_time)
        out["vns"].append(vns_solve(inst, seed=seed).served_count)
    return out


CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"
ACCEPTANCE = {}


def load_training_config(name, **overrides):
    from vrpfth.reinforce import TrainingConfig

    payload = json.loads((CONFIG_DIR / name).read_text())
    payload.update(overrides)
    return TrainingConfig.from_dict(payload)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])


@pytest.fixture(scope="session")
def two_customer_runs():
    """Five seeded training runs on the trivially feasible 2-customer family."""
    from vrpfth.baselines import oracle_exact
    from vrpfth.reinforce import greedy_served, train

    base = load_training_config("two_customer.json")
    holdout = base.family.holdout(100)
    optimal = [oracle_exact(inst).served_count for inst in holdout]
    runs = []
    t0 = time.perf_counter()
    for seed in range(5):
        cfg = load_training_config("two_customer.json", seed=seed)
        report, model = train(cfg)
        served = greedy_served(model, holdout)
        runs.append({"report": report, "optimal_rate": float(np.mean(np.equal(served, optimal)))})
    return {"runs": runs, "optimal": optimal, "holdout": holdout, "seconds": time.perf_counter() - t0}
