"""Independent reference implementations shared by the unit and acceptance tests."""
import itertools

import numpy as np

from vrpfth.baselines import oracle_exact
from vrpfth.instance import generate_euclidean, generate_road_style


def brute_force(instance):
    """Every ordering of every customer subset; no pruning.  Returns (served, travel)."""
    t = instance.network.travel_time
    d = instance.network.depot
    customers = list(instance.network.customers)
    best = (0, 0.0)
    for k in range(1, len(customers) + 1):
        perms = np.array(list(itertools.permutations(customers, k)))
        travel = t[d, perms[:, 0]]
        for j in range(1, k):
            travel = travel + t[perms[:, j - 1], perms[:, j]]
        travel = travel + t[perms[:, -1], d]
        ok = travel <= instance.horizon + 1e-9
        if ok.any():
            best = (k, float(travel[ok].min()))
    return best


def random_small_instance(i):
    rng = np.random.default_rng(i)
    n = int(rng.integers(1, 9))
    horizon = float(rng.choice([8.0, 12.0, 18.0, 24.0, 36.0]))
    if i % 2:
        return generate_road_style(n, i, horizon=horizon, symmetric=bool(i % 4 == 1))
    return generate_euclidean(n, i, horizon=horizon)


def oracle_matches_brute_force(count):
    mismatches = []
    for i in range(count):
        inst = random_small_instance(i)
        res = oracle_exact(inst)
        served, travel = brute_force(inst)
        if res.served_count != served or abs(res.total_travel - travel) > 1e-9 or not res.feasible:
            mismatches.append((i, res.served_count, served))
    return mismatches
