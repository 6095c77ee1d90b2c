"""The VRP-FTH Markov decision process: transitions, arrivals, rewards and feasibility masking."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .instance import InstanceSpec

RETURNED = "returned_to_depot"
VIOLATED = "horizon_violated"
ALL_SERVED = "all_served_and_returned"
NONE = "none"

# Route costs are compared against U with this slack to absorb float summation order.
FEASIBILITY_TOL = 1e-9


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class VehicleState:
    current_node: int
    active_requests: frozenset
    remaining_horizon: float
    decision_step: int
    visited: frozenset


@dataclass(frozen=True)
class EnvState:
    """Full MDP state.  The network part is static per instance and derived on demand."""

    instance: InstanceSpec
    vehicle: VehicleState
    served: frozenset = frozenset()
    route: tuple = ()
    total_travel: float = 0.0
    done: bool = False
    terminal_kind: str = NONE


@dataclass(frozen=True)
class StepOutcome:
    next_state: EnvState
    reward: float
    terminal: bool
    terminal_kind: str


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)   # (VehicleState, action, reward)
    route: tuple = ()
    served_count: int = 0
    customer_count: int = 0
    total_travel: float = 0.0
    feasible: bool = True
    terminal_kind: str = NONE

    @property
    def rewards(self) -> list:
        return [r for _, _, r in self.steps]

    @property
    def actions(self) -> list:
        return [a for _, a, _ in self.steps]

    @property
    def served_pct(self) -> float:
        return 100.0 * self.served_count / self.customer_count

    def to_record(self, **extra) -> dict:
        record = {
            "route": [int(v) for v in self.route],
            "rewards": [float(r) for r in self.rewards],
            "served": self.served_count,
            "customers": self.customer_count,
            "served_pct": self.served_pct,
            "travel_hours": round(self.total_travel, 6),
            "feasible": self.feasible,
            "terminal_kind": self.terminal_kind,
        }
        record.update(extra)
        return record

    def to_json(self, **extra) -> str:
        return json.dumps(self.to_record(**extra), sort_keys=True)


def penalty(instance: InstanceSpec) -> float:
    """Failure penalty M: the number of customers in the instance."""
    return float(instance.customer_count)


def reset(instance: InstanceSpec, seed: Optional[int] = None) -> EnvState:
    """Vehicle at the depot with the full horizon.

    ``seed`` is accepted for interface symmetry only: arrival schedules live in the instance.
    """
    depot = instance.network.depot
    vehicle = VehicleState(depot, frozenset(instance.deterministic_customers), float(instance.horizon),
                           0, frozenset([depot]))
    return EnvState(instance, vehicle, route=(depot,))


def legal_action_mask(state: EnvState) -> np.ndarray:
    if state.done:
        raise EnvError("legal_action_mask called on a terminal state")
    v = state.vehicle
    net = state.instance.network
    t = net.travel_time
    d = net.depot
    tau = v.remaining_horizon
    # Same operation order as step() followed by the direct return, so the check is exact.
    mask = (tau - t[v.current_node]) - t[:, d] >= 0
    if v.visited:
        mask[list(v.visited)] = False
    mask[d] = tau - t[v.current_node, d] >= 0
    return mask


def step(state: EnvState, action: int) -> StepOutcome:
    if state.done:
        raise EnvError("step called on a terminal state")
    inst = state.instance
    net = inst.network
    action = int(action)
    if not 0 <= action < net.node_count:
        raise EnvError(f"action {action} is not a node index")
    v = state.vehicle
    depot = net.depot
    leg = float(net.travel_time[v.current_node, action])
    tau = v.remaining_horizon - leg
    next_step = v.decision_step + 1

    reward = 0.0
    kind = NONE
    served = state.served
    if action == depot:
        if tau < 0:
            reward, kind = -penalty(inst), VIOLATED
        elif not (v.decision_step == 0 and v.current_node == depot):
            kind = ALL_SERVED if len(served) == inst.customer_count else RETURNED
        # depot -> depot at the first decision is a wait: no time passes, arrivals advance.
    elif tau <= 0:
        reward, kind = -penalty(inst), VIOLATED
    elif action in v.active_requests:
        reward = 1.0
        served = served | {action}

    visited = v.visited | {action}
    active = v.active_requests - {action}
    if next_step <= inst.request_cutoff:
        arrived = {c for c, s in inst.stochastic_arrivals.items() if s == next_step and c not in visited}
        if arrived:
            active = active | arrived

    vehicle = VehicleState(action, frozenset(active), tau, next_step, frozenset(visited))
    terminal = kind != NONE
    nxt = EnvState(inst, vehicle, served, state.route + (action,), state.total_travel + leg,
                   terminal, kind)
    return StepOutcome(nxt, reward, terminal, kind)


Policy = Callable[[EnvState, np.ndarray], np.ndarray]


def step_limit(instance: InstanceSpec) -> int:
    return instance.network.node_count + instance.request_cutoff + 2


def select_action(probs: np.ndarray, mask: np.ndarray, decode_mode: str, rng) -> int:
    probs = np.asarray(probs, dtype=float)
    if decode_mode == "greedy":
        # argmax picks the lowest index among ties
        return int(np.argmax(np.where(mask, probs, -np.inf)))
    if decode_mode == "sample":
        p = np.clip(probs, 0.0, None)
        return int(rng.choice(len(p), p=p / p.sum()))
    raise ValueError(f"unknown decode mode {decode_mode!r}")


def rollout(instance: InstanceSpec, policy: Policy, decode_mode: str = "sample",
            seed: Optional[int] = None) -> Trajectory:
    rng = np.random.default_rng(seed)
    state = reset(instance, seed)
    traj = Trajectory(customer_count=instance.customer_count)
    limit = step_limit(instance)
    while not state.done:
        if len(traj.steps) >= limit:
            raise EnvError(f"episode exceeded {limit} steps; policy keeps the vehicle busy")
        mask = legal_action_mask(state)
        action = select_action(policy(state, mask), mask, decode_mode, rng)
        out = step(state, action)
        traj.steps.append((state.vehicle, action, out.reward))
        state = out.next_state
    return finish(traj, state)


def finish(traj: Trajectory, state: EnvState) -> Trajectory:
    traj.route = state.route
    traj.served_count = sum(1 for r in traj.rewards if r > 0)
    traj.total_travel = state.total_travel
    traj.feasible = not any(r < 0 for r in traj.rewards)
    traj.terminal_kind = state.terminal_kind
    return traj


def uniform_random_policy(state: EnvState, mask: np.ndarray) -> np.ndarray:
    return mask / mask.sum()


def run_actions(instance: InstanceSpec, actions) -> Trajectory:
    """Replay a fixed action sequence (stops early if the episode terminates)."""
    state = reset(instance)
    traj = Trajectory(customer_count=instance.customer_count)
    for a in actions:
        if state.done:
            break
        out = step(state, a)
        traj.steps.append((state.vehicle, int(a), out.reward))
        state = out.next_state
    return finish(traj, state)
