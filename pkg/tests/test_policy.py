import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vrpfth import env
from vrpfth.instance import generate_euclidean
from vrpfth.policy import (
    CheckpointError, PolicyConfig, PolicyNetwork, VehicleBatch, customer_embedding,
    encode_vehicle_state, global_graph_embedding, load_checkpoint, masked_log_softmax,
    save_checkpoint,
)

D = torch.float64


def small_model(seed=0, **kw):
    return PolicyNetwork(PolicyConfig(pad_to=12, init_seed=seed, **kw))


def states_for(model, inst, actions=()):
    s = env.reset(inst)
    for a in actions:
        s = env.step(s, a).next_state
    mask = env.legal_action_mask(s)
    return s, model.vehicle_batch([s], [mask])


def test_vehicle_encoding_at_reset_deterministic():
    model = small_model()
    inst = generate_euclidean(6, 1)
    _, vb = states_for(model, inst)
    h = model.embed(model.network_tensors([inst])).h
    enc = encode_vehicle_state(h, vb)
    assert enc.shape == (1, 66)
    assert enc[0, -2] == 1.0 and enc[0, -1] == 1.0
    assert torch.equal(enc[0, :64], h[0, 0])


def test_vehicle_encoding_stochastic_en50_half_active():
    model = PolicyNetwork(PolicyConfig(init_seed=0))
    inst = generate_euclidean(50, 1, 0.5, 18.0)
    _, vb = states_for(model, inst)
    assert vb.active_frac.item() == 0.5


def test_horizon_ablation_zeroes_tau_in_query_input():
    h = torch.randn(1, 3, 4, dtype=D)
    vb = VehicleBatch(torch.tensor([1]), torch.ones(1, 3, dtype=torch.bool), torch.tensor([0.7], dtype=D),
                      torch.tensor([0.5], dtype=D), torch.ones(1, 3, dtype=torch.bool))
    assert encode_vehicle_state(h, vb, use_horizon=False)[0, -2] == 0.0


def test_global_embedding_of_identical_nodes():
    h = torch.tensor([1.0, -2.0, 3.0], dtype=D).repeat(1, 5, 1)
    q = torch.randn(1, 3, dtype=D)
    assert torch.allclose(global_graph_embedding(q, h), h[:, 0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_global_embedding_in_convex_hull(seed):
    g = torch.Generator().manual_seed(seed)
    h = torch.randn(2, 6, 8, generator=g, dtype=D)
    hg = global_graph_embedding(torch.randn(2, 8, generator=g, dtype=D) * 3, h)
    assert torch.all(hg <= h.max(1).values + 1e-12) and torch.all(hg >= h.min(1).values - 1e-12)


def test_global_embedding_hand_example():
    h = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]], dtype=D)
    q = torch.tensor([[math.log(2.0), 0.0]], dtype=D)
    # scores: ln2, 0, ln2 -> weights 2/5, 1/5, 2/5
    expected = torch.tensor([[2 / 5 + 2 / 5, 1 / 5 + 2 / 5]], dtype=D)
    assert torch.allclose(global_graph_embedding(q, h), expected, atol=1e-6)


def test_customer_embedding_cases():
    h = torch.randn(1, 4, 3, dtype=D)
    none = torch.zeros(1, 4, dtype=torch.bool)
    assert torch.all(customer_embedding(none, h) == 0)
    one = none.clone()
    one[0, 2] = True
    assert torch.equal(customer_embedding(one, h), h[:, 2])
    many = torch.tensor([[False, True, True, True]])
    a = customer_embedding(many, h)
    b = h[:, 3] + h[:, 1] + h[:, 2]
    assert torch.allclose(a, b)


def test_forced_action_has_probability_one():
    model = small_model()
    inst = generate_euclidean(5, 2)
    s, vb = states_for(model, inst)
    mask = torch.zeros_like(vb.mask)
    mask[0, 3] = True
    dist = model(model.network_tensors([inst]), vb._replace(mask=mask))
    assert dist.probs[0, 3].item() == pytest.approx(1.0, abs=1e-6)


def test_all_masked_is_an_error():
    model = small_model()
    inst = generate_euclidean(5, 2)
    _, vb = states_for(model, inst)
    with pytest.raises(ValueError):
        model(model.network_tensors([inst]), vb._replace(mask=torch.zeros_like(vb.mask)))


def numpy_head(model, inst, state, mask):
    """Independent numpy rendering of the head equations on the model's weights."""
    p = {k: v.detach().numpy() for k, v in model.head.state_dict().items()}
    h = model.embed(model.network_tensors([inst])).h[0].detach().numpy()
    v = state.vehicle
    cur = h[v.current_node]
    tau = v.remaining_horizon / inst.horizon
    frac = len(v.active_requests) / inst.customer_count
    q_t = p["query.weight"] @ np.concatenate([cur, [tau, frac]])
    z = h @ q_t
    a = np.exp(z - z.max())
    hg = (a / a.sum()) @ h
    hc = h[sorted(v.active_requests)].sum(0) if v.active_requests else np.zeros(h.shape[1])
    te = p["horizon_embed.weight"] @ [tau] + p["horizon_embed.bias"]
    ctx = np.concatenate([hg, cur, hc, te])
    proj = p["context_proj.weight"] @ ctx + p["context_proj.bias"]
    q = p["w_q.weight"] @ proj
    k = h @ p["w_k.weight"].T
    u = 10 * np.tanh(k @ q / math.sqrt(len(q)))
    with mpmath.workdps(50):
        z = [mpmath.mpf(float(ui)) + (0 if m else mpmath.mpf(-1e9)) for ui, m in zip(u, mask)]
        zmax = max(z)
        ex = [mpmath.exp(zi - zmax) for zi in z]
        tot = mpmath.fsum(ex)
        return u, np.array([float(e / tot) for e in ex])


@pytest.mark.parametrize("seed", range(8))
def test_distribution_matches_high_precision_oracle(seed):
    rng = np.random.default_rng(seed)
    model = small_model(seed)
    inst = generate_euclidean(7, seed, 0.4, 12.0, request_cutoff=3)
    traj = env.rollout(inst, env.uniform_random_policy, "sample", seed)
    cut = int(rng.integers(0, len(traj.actions)))
    s, vb = states_for(model, inst, traj.actions[:cut])
    dist = model(model.network_tensors([inst]), vb)
    u_ref, p_ref = numpy_head(model, inst, s, vb.mask[0].numpy())
    np.testing.assert_allclose(dist.logits[0].detach().numpy(), u_ref, atol=1e-9)
    np.testing.assert_allclose(dist.probs[0].detach().numpy(), p_ref, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
def test_masked_softmax_shift_invariance(seed, shift):
    g = torch.Generator().manual_seed(seed)
    u = torch.tanh(torch.randn(3, 7, generator=g, dtype=D)) * 10
    mask = torch.rand(3, 7, generator=g) < 0.6
    mask[:, 0] = True
    a = masked_log_softmax(u, mask, -1e9).exp()
    b = masked_log_softmax(u + shift, mask, -1e9).exp()
    assert torch.allclose(a[mask], b[mask], atol=1e-9)
    assert torch.all(a[~mask] < 1e-8)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), n=st.integers(2, 9))
def test_logits_clipped_and_probabilities_valid(seed, n):
    model = small_model(seed % 5)
    inst = generate_euclidean(n, seed)
    s, vb = states_for(model, inst)
    dist = model(model.network_tensors([inst]), vb)
    assert torch.all(dist.logits.abs() <= 10)
    assert abs(dist.probs[vb.mask].sum().item() - 1) < 1e-6
    assert torch.all(dist.probs[~vb.mask] < 1e-8)


def test_horizon_sensitivity():
    hits = 0
    inst = generate_euclidean(6, 3)
    for seed in range(20):
        model = small_model(seed)
        s, vb = states_for(model, inst)
        tau = vb.horizon.clone().requires_grad_(True)
        dist = model(model.network_tensors([inst]), vb._replace(horizon=tau))
        a = int(torch.argmax(dist.probs[0]))
        (g,) = torch.autograd.grad(dist.log_probs[0, a], tau)
        hits += bool(g.abs().item() > 0)
    assert hits >= 19


@pytest.mark.parametrize("flag", ["use_global_embedding", "use_horizon_in_embedding", "use_edge_features"])
def test_ablations_change_outputs(flag):
    inst = generate_euclidean(6, 3)
    full = small_model(1)
    ablated = small_model(1, **{flag: False})
    s, vb = states_for(full, inst, [2])
    a = full(full.network_tensors([inst]), vb).logits
    b = ablated(ablated.network_tensors([inst]), vb).logits
    assert not torch.equal(a, b)


def test_checkpoint_round_trip(tmp_path):
    model = small_model(4)
    inst = generate_euclidean(6, 4)
    path = tmp_path / "m.pt"
    save_checkpoint(model, path, {"note": 1})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": 1}
    a = env.rollout(inst, model.as_policy(), "greedy")
    b = env.rollout(inst, loaded.as_policy(), "greedy")
    assert a.route == b.route


def test_checkpoint_shape_validation(tmp_path):
    model = small_model(4)
    path = tmp_path / "m.pt"
    save_checkpoint(model, path)
    payload = torch.load(path, weights_only=False)
    payload["state_dict"]["head.w_k.weight"] = torch.zeros(3, 3, dtype=D)
    torch.save(payload, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        save_checkpoint(model, path)
        load_checkpoint(path, PolicyConfig(pad_to=13))
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
