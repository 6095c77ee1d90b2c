"""Classical comparison solvers: exact oracle, greedy, random, genetic algorithm, VNS."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import env as vrp_env
from .env import FEASIBILITY_TOL
from .instance import InstanceSpec

ORACLE_MAX_CUSTOMERS = 12


class SolverError(RuntimeError):
    pass


@dataclass
class SolverResult:
    route: tuple
    served_count: int
    total_travel: float
    feasible: bool
    solve_time: float
    customer_count: int
    label: str = ""
    history: list = field(default_factory=list)

    @property
    def served_pct(self) -> float:
        return 100.0 * self.served_count / self.customer_count

    def to_record(self, **extra) -> dict:
        record = {
            "route": [int(v) for v in self.route],
            "served": self.served_count,
            "customers": self.customer_count,
            "served_pct": self.served_pct,
            "travel_hours": round(self.total_travel, 6),
            "feasible": self.feasible,
        }
        if self.label:
            record["label"] = self.label
        record.update(extra)
        return record


def route_cost(travel_time: np.ndarray, route: Sequence[int]) -> float:
    return float(sum(travel_time[a, b] for a, b in zip(route[:-1], route[1:])))


def verify_route(instance: InstanceSpec, route: Sequence[int]) -> tuple[bool, int, float]:
    """Recompute feasibility from scratch: depot at both ends, no repeats, total time <= U."""
    net = instance.network
    d = net.depot
    travel = route_cost(net.travel_time, route)
    inner = [v for v in route[1:-1] if v != d]
    ok = (len(route) >= 2 and route[0] == d and route[-1] == d
          and len(inner) == len(set(inner)) and all(0 <= v < net.node_count for v in inner)
          and travel <= instance.horizon + FEASIBILITY_TOL)
    return ok, len(set(inner)), travel


def _result(instance, route, t0, label="", history=None) -> SolverResult:
    ok, served, travel = verify_route(instance, route)
    return SolverResult(tuple(int(v) for v in route), served, travel, ok,
                        time.perf_counter() - t0, instance.customer_count, label, history or [])


def oracle_exact(instance: InstanceSpec, max_customers: int = ORACLE_MAX_CUSTOMERS) -> SolverResult:
    """Maximum served customers, ties broken by shorter travel.

    Depth-first search over visiting orders.  A branch is cut when the customers still
    reachable (go there and return directly) cannot lift it past the incumbent, or when the
    same visited set has already been reached at the same last node with no more travel.
    Stochastic instances are solved with full information (labelled ``clairvoyant``).
    """
    t0 = time.perf_counter()
    if instance.customer_count > max_customers:
        raise SolverError(f"oracle capped at {max_customers} customers, got {instance.customer_count}")
    label = "" if instance.is_deterministic else "clairvoyant"
    t = instance.network.travel_time.tolist()
    d = instance.network.depot
    budget = instance.horizon + FEASIBILITY_TOL
    customers = list(instance.network.customers)
    best = {"served": 0, "travel": 0.0, "route": [d, d]}
    seen: dict = {}
    path = [d]

    def dfs(cur: int, visited: int, travel: float):
        served = len(path) - 1
        back = travel + t[cur][d]
        if served > 0 and back <= budget and (
                served > best["served"] or (served == best["served"] and back < best["travel"])):
            best.update(served=served, travel=back, route=path + [d])
        reachable = [v for v in customers
                     if not visited >> v & 1 and travel + t[cur][v] + t[v][d] <= budget]
        if served + len(reachable) < best["served"]:
            return
        reachable.sort(key=lambda v: (t[cur][v], v))
        for v in reachable:
            nt = travel + t[cur][v]
            key = (visited | 1 << v, v)
            if seen.get(key, math.inf) <= nt:
                continue
            seen[key] = nt
            path.append(v)
            dfs(v, visited | 1 << v, nt)
            path.pop()

    dfs(d, 1 << d, 0.0)
    return _result(instance, best["route"], t0, label)


def greedy_nearest_feasible(instance: InstanceSpec) -> SolverResult:
    """Repeatedly drive to the nearest unmasked active customer; go home when none is left."""
    t0 = time.perf_counter()
    t = instance.network.travel_time
    d = instance.network.depot

    def policy(state, mask):
        v = state.vehicle
        cands = [c for c in sorted(v.active_requests) if mask[c]]
        probs = np.zeros(len(mask))
        if cands:
            probs[min(cands, key=lambda c: (t[v.current_node, c], c))] = 1.0
        else:
            probs[d] = 1.0
        return probs

    traj = vrp_env.rollout(instance, policy, "greedy")
    return _trajectory_result(instance, traj, t0, "greedy")


def random_policy_solve(instance: InstanceSpec, seed: int = 0) -> SolverResult:
    t0 = time.perf_counter()
    traj = vrp_env.rollout(instance, vrp_env.uniform_random_policy, "sample", seed)
    return _trajectory_result(instance, traj, t0, "random")


def _trajectory_result(instance, traj, t0, label) -> SolverResult:
    route = [v for i, v in enumerate(traj.route) if not (i == 1 and v == traj.route[0] and len(traj.route) > 2)]
    ok, _, travel = verify_route(instance, route)
    return SolverResult(tuple(int(v) for v in route), traj.served_count, travel, ok and traj.feasible,
                        time.perf_counter() - t0, instance.customer_count, label)


def _require_deterministic(instance: InstanceSpec, name: str) -> None:
    if not instance.is_deterministic:
        raise SolverError(f"{name} runs on deterministic instances only")


def decode_permutation(perm: Sequence[int], t: list, depot: int, horizon: float) -> tuple[list, float]:
    """Follow the permutation, skipping customers the feasibility mask forbids."""
    route = [depot]
    cur = depot
    tau = horizon
    for v in perm:
        if (tau - t[cur][v]) - t[v][depot] >= 0:
            tau -= t[cur][v]
            route.append(v)
            cur = v
    route.append(depot)
    return route, horizon - tau + t[cur][depot]


def _order_crossover(p1: list, p2: list, rng: np.random.Generator) -> list:
    n = len(p1)
    a, b = sorted(rng.choice(n + 1, size=2, replace=False))
    middle = p1[a:b]
    taken = set(middle)
    rest = [g for g in p2[b:] + p2[:b] if g not in taken]
    child = [None] * n
    child[a:b] = middle
    slots = list(range(b, n)) + list(range(a))
    for pos, g in zip(slots, rest):
        child[pos] = g
    return child


def ga_solve(instance: InstanceSpec, population: int = 100, generations: int = 1000,
             mutation_rate: float = 0.01, seed: int = 0, tournament: int = 3) -> SolverResult:
    """Permutation GA: order crossover, per-gene swap mutation, tournament selection, elitism 1."""
    t0 = time.perf_counter()
    _require_deterministic(instance, "GA")
    rng = np.random.default_rng(seed)
    t = instance.network.travel_time.tolist()
    d = instance.network.depot
    customers = list(instance.network.customers)
    n = len(customers)
    cache: dict = {}

    def fitness(perm):
        key = tuple(perm)
        if key not in cache:
            route, travel = decode_permutation(perm, t, d, instance.horizon)
            cache[key] = (len(route) - 2, -travel)
        return cache[key]

    pop = [list(rng.permutation(customers)) for _ in range(population)]
    fit = [fitness(p) for p in pop]
    history = []
    for _ in range(generations):
        elite = max(range(population), key=lambda i: fit[i])
        history.append(fit[elite])
        new = [pop[elite]]
        while len(new) < population:
            parents = []
            for _ in range(2):
                contenders = rng.integers(0, population, size=tournament)
                parents.append(pop[max(contenders, key=lambda i: fit[i])])
            child = _order_crossover(parents[0], parents[1], rng) if n > 1 else list(parents[0])
            for i in np.flatnonzero(rng.random(n) < mutation_rate):
                j = int(rng.integers(n))
                child[i], child[j] = child[j], child[i]
            new.append(child)
        pop = new
        fit = [fitness(p) for p in pop]
    best = pop[max(range(population), key=lambda i: fit[i])]
    route, _ = decode_permutation(best, t, d, instance.horizon)
    return _result(instance, route, t0, "ga", history)


class _Tour:
    """Customer sequence with cached travel; depot implicit at both ends."""

    def __init__(self, seq, t, d):
        self.seq = list(seq)
        self.travel = route_cost_list(t, d, self.seq)

    def key(self):
        return (len(self.seq), -self.travel)


def route_cost_list(t, d, seq) -> float:
    if not seq:
        return 0.0
    total = t[d][seq[0]] + t[seq[-1]][d]
    for a, b in zip(seq[:-1], seq[1:]):
        total += t[a][b]
    return total


def _better(a: tuple, b: tuple) -> bool:
    return a[0] > b[0] or (a[0] == b[0] and a[1] > b[1] + 1e-12)


def _local_search(seq, t, d, budget, customers):
    """Variable neighbourhood descent over insert, relocate, 2-opt and swap-in/out moves."""
    seq = list(seq)
    cost = route_cost_list(t, d, seq)

    def ins_delta(s, pos, v):
        a = d if pos == 0 else s[pos - 1]
        b = d if pos == len(s) else s[pos]
        return t[a][v] + t[v][b] - t[a][b]

    improved = True
    while improved:
        improved = False
        # N1: insert an excluded customer at its cheapest feasible position
        outside = [v for v in customers if v not in set(seq)]
        best = None
        for v in outside:
            for pos in range(len(seq) + 1):
                c = cost + ins_delta(seq, pos, v)
                if c <= budget and (best is None or c < best[0]):
                    best = (c, pos, v)
        if best is not None:
            seq.insert(best[1], best[2])
            cost = route_cost_list(t, d, seq)
            improved = True
            continue
        # N2: relocate one customer
        for i in range(len(seq)):
            v = seq[i]
            rest = seq[:i] + seq[i + 1:]
            base = route_cost_list(t, d, rest)
            for pos in range(len(rest) + 1):
                c = base + ins_delta(rest, pos, v)
                if c < cost - 1e-12:
                    seq = rest[:pos] + [v] + rest[pos:]
                    cost = c
                    improved = True
                    break
            if improved:
                break
        if improved:
            continue
        # N3: 2-opt segment reversal
        for i in range(len(seq) - 1):
            for j in range(i + 1, len(seq)):
                cand = seq[:i] + seq[i:j + 1][::-1] + seq[j + 1:]
                c = route_cost_list(t, d, cand)
                if c < cost - 1e-12:
                    seq, cost, improved = cand, c, True
                    break
            if improved:
                break
        if improved:
            continue
        # N4: swap an included customer for an excluded one (same slot)
        outside = [v for v in customers if v not in set(seq)]
        for i in range(len(seq)):
            for v in outside:
                cand = seq[:i] + [v] + seq[i + 1:]
                c = route_cost_list(t, d, cand)
                if c < cost - 1e-12 and c <= budget:
                    seq, cost, improved = cand, c, True
                    break
            if improved:
                break
    return seq, cost


def vns_solve(instance: InstanceSpec, max_iterations: int = 100, seed: int = 0,
              max_shake: int = 3) -> SolverResult:
    """Variable neighbourhood search started from the greedy route.

    Objective is lexicographic: more customers first, then less travel.  Shaking at level k
    drops k random customers and tries to splice in k random outsiders.
    """
    t0 = time.perf_counter()
    _require_deterministic(instance, "VNS")
    rng = np.random.default_rng(seed)
    t = instance.network.travel_time.tolist()
    d = instance.network.depot
    budget = instance.horizon + FEASIBILITY_TOL
    customers = list(instance.network.customers)

    start = [v for v in greedy_nearest_feasible(instance).route if v != d]
    cur, cur_cost = _local_search(start, t, d, budget, customers)
    best, best_cost = list(cur), cur_cost
    history = [(len(best), -best_cost)]
    k = 1
    for _ in range(max_iterations):
        seq = list(cur)
        for _ in range(min(k, len(seq))):
            seq.pop(int(rng.integers(len(seq))))
        outside = [v for v in customers if v not in set(seq)]
        rng.shuffle(outside)
        for v in outside[:k]:
            pos = int(rng.integers(len(seq) + 1))
            cand = seq[:pos] + [v] + seq[pos:]
            if route_cost_list(t, d, cand) <= budget:
                seq = cand
        seq, cost = _local_search(seq, t, d, budget, customers)
        if _better((len(seq), -cost), (len(cur), -cur_cost)):
            cur, cur_cost, k = seq, cost, 1
            if _better((len(cur), -cur_cost), (len(best), -best_cost)):
                best, best_cost = list(cur), cur_cost
        else:
            k = k % max_shake + 1
        history.append((len(best), -best_cost))
    return _result(instance, [d] + best + [d], t0, "vns", history)
