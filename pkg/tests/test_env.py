import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vrpfth import env
from vrpfth.instance import generate_euclidean, generate_road_style
from conftest import line_instance, make_instance


def brute_force_mask(state):
    """Simulate each candidate move plus the direct return and check the budget."""
    inst = state.instance
    t = inst.network.travel_time
    d = inst.network.depot
    v = state.vehicle
    out = []
    for node in range(inst.network.node_count):
        if node == d:
            out.append(v.remaining_horizon - t[v.current_node, d] >= 0)
            continue
        if node in v.visited:
            out.append(False)
            continue
        after = env.step(state, node).next_state
        left = after.vehicle.remaining_horizon
        out.append(left - t[node, d] >= 0)
    return np.array(out)


def test_reset_deterministic_en50():
    inst = generate_euclidean(50, 1, 0.0, 24.0)
    s = env.reset(inst)
    assert len(s.vehicle.active_requests) == 50
    assert s.vehicle.remaining_horizon == 24.0
    assert s.vehicle.current_node == 0 and s.vehicle.visited == {0}
    assert s.vehicle.decision_step == 0


def test_reset_stochastic_en50_has_half_active():
    s = env.reset(generate_euclidean(50, 1, 0.5, 18.0))
    assert len(s.vehicle.active_requests) == 25


def test_reset_keeps_instance_schedule():
    inst = generate_euclidean(10, 2, 0.5)
    a, b = env.reset(inst, seed=1), env.reset(inst, seed=2)
    assert a == b


def test_single_customer_both_unmasked():
    inst = line_instance([0.0, 5.0])   # round trip 10 h < 24 h
    mask = env.legal_action_mask(env.reset(inst))
    assert mask.tolist() == [True, True]


def test_exhausted_horizon_masks_every_customer():
    inst = line_instance([0.0, 2.0, 3.0], horizon=4.0)
    s = env.step(env.reset(inst), 1).next_state
    assert s.vehicle.remaining_horizon == 2.0
    mask = env.legal_action_mask(s)
    assert mask.tolist() == [True, False, False]


def test_mask_on_terminal_state_errors():
    inst = line_instance([0.0, 1.0])
    s = env.step(env.step(env.reset(inst), 1).next_state, 0).next_state
    assert s.done
    with pytest.raises(env.EnvError):
        env.legal_action_mask(s)
    with pytest.raises(env.EnvError):
        env.step(s, 1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), road=st.booleans(), frac=st.sampled_from([0.0, 0.4]),
       actions=st.lists(st.integers(0, 5), max_size=6))
def test_mask_matches_brute_force_on_five_customers(seed, road, frac, actions):
    inst = (generate_road_style if road else generate_euclidean)(5, seed, frac, 12.0)
    state = env.reset(inst)
    for a in actions:
        if state.done:
            break
        assert np.array_equal(env.legal_action_mask(state), brute_force_mask(state))
        state = env.step(state, a).next_state


def test_reward_plus_one_for_active_customer():
    inst = line_instance([0.0, 2.0, 3.0])
    out = env.step(env.reset(inst), 2)
    assert out.reward == 1.0 and not out.terminal
    assert out.next_state.vehicle.remaining_horizon == 21.0


def test_horizon_violation_penalty_is_customer_count():
    inst = line_instance([0.0, 5.0, 30.0, 1.0])
    out = env.step(env.reset(inst), 2)
    assert out.reward == -3.0
    assert out.terminal and out.terminal_kind == env.VIOLATED


def test_late_return_to_depot_is_penalized():
    inst = line_instance([0.0, 10.0, 20.0], horizon=30.0)
    s = env.reset(inst)
    s = env.step(s, 1).next_state
    s = env.step(s, 2).next_state          # tau = 10, legal choice would only be depot
    out = env.step(s, 0)                    # 20 h home > 10 h left
    assert out.reward == -2.0 and out.terminal_kind == env.VIOLATED


def test_hand_simulated_three_node_trip():
    # depot 0, customers at 1 h and 2 h on a line
    inst = line_instance([0.0, 1.0, 2.0])
    traj = env.run_actions(inst, [1, 2, 0])
    assert traj.rewards == [1.0, 1.0, 0.0]
    assert traj.terminal_kind == env.ALL_SERVED
    assert traj.served_count == 2 and traj.total_travel == 4.0 and traj.feasible
    traj = env.run_actions(inst, [2, 0])
    assert traj.rewards == [1.0, 0.0]
    assert traj.terminal_kind == env.RETURNED and traj.served_count == 1


def test_depot_at_first_decision_waits():
    inst = line_instance([0.0, 1.0, 2.0], stochastic={2: 1})
    s0 = env.reset(inst)
    out = env.step(s0, 0)
    assert not out.terminal and out.reward == 0.0
    assert out.next_state.vehicle.active_requests == {1, 2}
    out2 = env.step(out.next_state, 0)
    assert out2.terminal and out2.terminal_kind == env.RETURNED


def test_unarrived_customer_gives_no_reward_and_never_arrives():
    inst = line_instance([0.0, 1.0, 2.0], stochastic={2: 2})
    s = env.reset(inst)
    out = env.step(s, 2)
    assert out.reward == 0.0
    assert 2 in out.next_state.vehicle.visited
    out = env.step(out.next_state, 1)
    assert 2 not in out.next_state.vehicle.active_requests
    assert out.reward == 1.0


def test_no_arrivals_after_cutoff():
    inst = line_instance([0.0, 0.1, 0.2, 0.3, 5.0], stochastic={4: 2}, cutoff=2)
    s = env.reset(inst)
    s = env.step(s, 1).next_state
    assert 4 not in s.vehicle.active_requests
    s = env.step(s, 2).next_state
    assert 4 in s.vehicle.active_requests


def test_greedy_rollout_is_deterministic():
    inst = generate_euclidean(8, 4)
    pol = lambda s, m: np.where(m, np.linspace(1, 2, len(m)), 0)
    a = env.rollout(inst, pol, "greedy", seed=1)
    b = env.rollout(inst, pol, "greedy", seed=2)
    assert a.route == b.route and a.rewards == b.rewards


def test_greedy_tie_break_lowest_index():
    inst = generate_euclidean(5, 0, horizon=100.0)
    traj = env.rollout(inst, lambda s, m: m / m.sum(), "greedy")
    # uniform probabilities: lowest unmasked index, i.e. the depot wait then depot return
    assert traj.route == (0, 0, 0)


def test_all_served_terminates_at_depot():
    inst = generate_euclidean(4, 0, horizon=1000.0)
    # prefer customers over the depot
    pol = lambda s, m: np.where(m, np.r_[1e-3, np.ones(len(m) - 1)], 0)
    traj = env.rollout(inst, pol, "greedy")
    assert traj.served_count == 4
    assert traj.route[-1] == 0 and traj.terminal_kind == env.ALL_SERVED


def test_loop_guard():
    inst = line_instance([0.0, 1.0, 2.0])
    # ignores the mask and bounces between two customers forever
    seq = iter([1, 2] * 100)
    pol = lambda s, m: np.eye(3)[next(seq)]
    with pytest.raises(env.EnvError):
        env.rollout(inst, pol, "sample", seed=0)


def test_random_rollouts_en5_always_feasible():
    rng = np.random.default_rng(0)
    for i in range(1000):
        inst = generate_euclidean(5, int(rng.integers(1 << 30)), 0.0, 12.0)
        traj = env.rollout(inst, env.uniform_random_policy, "sample", seed=i)
        assert traj.feasible and traj.terminal_kind != env.VIOLATED
        assert traj.total_travel <= inst.horizon + env.FEASIBILITY_TOL


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), road=st.booleans(), frac=st.sampled_from([0.0, 0.5, 1.0]),
       rseed=st.integers(0, 1000))
def test_trajectory_invariants(seed, road, frac, rseed):
    inst = (generate_road_style if road else generate_euclidean)(7, seed, frac, 16.0, request_cutoff=4)
    traj = env.rollout(inst, env.uniform_random_policy, "sample", rseed)
    states = [s for s, _, _ in traj.steps]
    seen = set()
    for s, a, r in traj.steps:
        assert not (s.active_requests & s.visited)
        assert s.remaining_horizon <= inst.horizon
        known = s.active_requests | (s.visited - {0})
        assert seen <= known
        seen = set(known)
    positive = [a for s, a, r in traj.steps if r > 0]
    assert len(positive) == len(set(positive)) == traj.served_count
    assert all(a in s.active_requests for s, a, r in traj.steps if r > 0)
    # actives only grow through arrivals scheduled up to K
    for s_prev, s_next in zip(states, states[1:]):
        new = s_next.active_requests - s_prev.active_requests
        for c in new:
            assert inst.stochastic_arrivals[c] == s_next.decision_step <= inst.request_cutoff


def test_replaying_actions_is_deterministic():
    inst = generate_euclidean(6, 9, 0.5)
    traj = env.rollout(inst, env.uniform_random_policy, "sample", seed=3)
    again = env.run_actions(inst, traj.actions)
    assert again.route == traj.route and again.rewards == traj.rewards


def test_trajectory_export_record():
    inst = line_instance([0.0, 1.0, 2.0])
    rec = env.run_actions(inst, [1, 2, 0]).to_record(instance="x")
    assert rec["route"] == [0, 1, 2, 0] and rec["served_pct"] == 100.0 and rec["instance"] == "x"
