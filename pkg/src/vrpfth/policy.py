"""Policy head (cross-attention global embedding, context vector, clipped compatibility,
masked softmax) and the full policy network with checkpointing."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .encoder import EncoderConfig, GATEdgeEncoder, NodeEmbeddings, init_linear_
from .env import EnvState
from .instance import DEFAULT_K_NEIGHBORS, DEFAULT_PAD_TO, InstanceSpec, derive_network_state

CHECKPOINT_FORMAT = "vrpfth-checkpoint"
CHECKPOINT_VERSION = 1

DTYPE = torch.float64


class CheckpointError(RuntimeError):
    pass


@dataclass
class PolicyConfig:
    embed_dim: int = 64
    heads: int = 4
    layers: int = 2
    pad_to: int = DEFAULT_PAD_TO
    k_neighbors: int = DEFAULT_K_NEIGHBORS
    horizon_embed_dim: int = 16
    context_dim: int = 256
    clip: float = 10.0
    mask_value: float = -1e9
    horizon_input: str = "normalized"   # or "hours"
    use_edge_features: bool = True
    use_global_embedding: bool = True
    use_horizon_in_embedding: bool = True
    init_seed: int = 0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.pad_to + 1, self.embed_dim, self.heads, self.layers,
                             self.use_edge_features)

    @classmethod
    def from_dict(cls, payload: dict) -> "PolicyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown policy config keys: {sorted(unknown)}")
        return cls(**payload)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


class VehicleBatch(NamedTuple):
    current: torch.Tensor      # (B,) long
    active: torch.Tensor       # (B, N) bool
    horizon: torch.Tensor      # (B,) remaining horizon as fed to the model
    active_frac: torch.Tensor  # (B,) |C_t| / |C|
    mask: torch.Tensor         # (B, N) bool, True = allowed


class ActionDistribution(NamedTuple):
    probs: torch.Tensor
    logits: torch.Tensor
    log_probs: torch.Tensor
    mask: torch.Tensor


def encode_vehicle_state(h: torch.Tensor, vehicle: VehicleBatch, use_horizon: bool = True) -> torch.Tensor:
    """concat(h_{i_t}, tau_t/U, |C_t|/|C|) with shape (B, D + 2)."""
    cur = h[torch.arange(h.shape[0]), vehicle.current]
    tau = vehicle.horizon if use_horizon else torch.zeros_like(vehicle.horizon)
    return torch.cat([cur, tau[:, None], vehicle.active_frac[:, None]], dim=-1)


def global_graph_embedding(query: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """h^G = sum_k softmax_k(Q . h_k) h_k; query (B, D), h (B, N, D)."""
    alpha = torch.softmax(torch.einsum("bd,bnd->bn", query, h), dim=-1)
    return torch.einsum("bn,bnd->bd", alpha, h)


def customer_embedding(active: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    return (active.to(h.dtype)[..., None] * h).sum(dim=1)


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor, mask_value: float) -> torch.Tensor:
    return torch.log_softmax(logits + mask_value * (~mask).to(logits.dtype), dim=-1)


class PolicyHead(nn.Module):
    def __init__(self, config: PolicyConfig, generator=None):
        super().__init__()
        d = config.embed_dim
        self.config = config
        self.query = nn.Linear(d + 2, d, bias=False)                       # W_q
        self.horizon_embed = nn.Linear(1, config.horizon_embed_dim)
        self.context_proj = nn.Linear(3 * d + config.horizon_embed_dim, config.context_dim)
        self.w_q = nn.Linear(config.context_dim, config.context_dim, bias=False)   # W^Q
        self.w_k = nn.Linear(d, config.context_dim, bias=False)                    # W^K
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        for layer in (self.query, self.horizon_embed, self.context_proj, self.w_q, self.w_k):
            init_linear_(layer, generator)

    def context(self, h: torch.Tensor, vehicle: VehicleBatch) -> torch.Tensor:
        cfg = self.config
        enc = encode_vehicle_state(h, vehicle, cfg.use_horizon_in_embedding)
        h_global = global_graph_embedding(self.query(enc), h)
        if not cfg.use_global_embedding:
            h_global = torch.zeros_like(h_global)
        h_cur = h[torch.arange(h.shape[0]), vehicle.current]
        h_cust = customer_embedding(vehicle.active, h)
        tau = self.horizon_embed(vehicle.horizon[:, None])
        return torch.cat([h_global, h_cur, h_cust, tau], dim=-1)

    def forward(self, h: torch.Tensor, vehicle: VehicleBatch) -> ActionDistribution:
        if not bool(vehicle.mask.any(dim=-1).all()):
            raise ValueError("every node is masked; no legal action")
        cfg = self.config
        q = self.w_q(self.context_proj(self.context(h, vehicle)))
        k = self.w_k(h)
        compat = torch.einsum("bd,bnd->bn", q, k) / math.sqrt(q.shape[-1])
        logits = cfg.clip * torch.tanh(compat)
        log_probs = masked_log_softmax(logits, vehicle.mask, cfg.mask_value)
        return ActionDistribution(log_probs.exp(), logits, log_probs, vehicle.mask)


class NetworkTensors(NamedTuple):
    x: torch.Tensor
    adjacency: torch.Tensor
    edge_features: torch.Tensor


class PolicyNetwork(nn.Module):
    """Encoder plus head.  Parameters are float64 so finite-difference checks are meaningful."""

    def __init__(self, config: PolicyConfig | None = None):
        super().__init__()
        self.config = config or PolicyConfig()
        gen = torch.Generator().manual_seed(self.config.init_seed)
        self.encoder = GATEdgeEncoder(self.config.encoder_config())
        self.head = PolicyHead(self.config)
        self.to(DTYPE)
        self.encoder.reset_parameters(gen)
        self.head.reset_parameters(gen)

    def k_for(self, node_count: int) -> int:
        return min(self.config.k_neighbors, node_count - 1)

    def network_tensors(self, instances: Sequence[InstanceSpec]) -> NetworkTensors:
        states = [derive_network_state(inst, self.k_for(inst.network.node_count), self.config.pad_to)
                  for inst in instances]
        return NetworkTensors(
            torch.as_tensor(np.stack([s.node_features for s in states]), dtype=DTYPE),
            torch.as_tensor(np.stack([s.adjacency for s in states])),
            torch.as_tensor(np.stack([s.edge_features for s in states]), dtype=DTYPE))

    def embed(self, net: NetworkTensors) -> NodeEmbeddings:
        return self.encoder(net.x, net.adjacency, net.edge_features)

    def vehicle_batch(self, states: Sequence[EnvState], masks: Sequence[np.ndarray]) -> VehicleBatch:
        n = states[0].instance.network.node_count
        current = torch.tensor([s.vehicle.current_node for s in states], dtype=torch.long)
        active = torch.zeros((len(states), n), dtype=torch.bool)
        for b, s in enumerate(states):
            if s.vehicle.active_requests:
                active[b, list(s.vehicle.active_requests)] = True
        if self.config.horizon_input == "hours":
            horizon = [s.vehicle.remaining_horizon for s in states]
        else:
            horizon = [s.vehicle.remaining_horizon / s.instance.horizon for s in states]
        frac = [len(s.vehicle.active_requests) / s.instance.customer_count for s in states]
        return VehicleBatch(current, active, torch.tensor(horizon, dtype=DTYPE),
                            torch.tensor(frac, dtype=DTYPE),
                            torch.as_tensor(np.stack(masks)))

    def forward(self, net: NetworkTensors, vehicle: VehicleBatch) -> ActionDistribution:
        return self.head(self.embed(net).h, vehicle)

    def as_policy(self):
        """Callback (state, mask) -> probabilities; embeddings are recomputed on every call."""
        cache = {}

        def policy(state: EnvState, mask: np.ndarray) -> np.ndarray:
            key = id(state.instance)
            if key not in cache:
                cache.clear()
                cache[key] = (state.instance, self.network_tensors([state.instance]))
            with torch.no_grad():
                dist = self(cache[key][1], self.vehicle_batch([state], [mask]))
            return dist.probs[0].numpy()

        return policy


def parameter_shapes(model: nn.Module) -> dict:
    return {name: list(t.shape) for name, t in model.state_dict().items()}


def save_checkpoint(model: PolicyNetwork, path, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "shapes": parameter_shapes(model),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, expected: PolicyConfig | None = None) -> tuple[PolicyNetwork, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a vrpfth checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    config = PolicyConfig.from_dict(payload["config"])
    if expected is not None and asdict(expected) != asdict(config):
        raise CheckpointError(f"{path}: checkpoint config does not match the requested config")
    model = PolicyNetwork(config)
    want = parameter_shapes(model)
    if payload["shapes"] != want:
        raise CheckpointError(f"{path}: shape manifest disagrees with config")
    got = {k: list(v.shape) for k, v in payload["state_dict"].items()}
    if got != want:
        bad = sorted(k for k in want.keys() | got.keys() if want.get(k) != got.get(k))
        raise CheckpointError(f"{path}: parameter shapes do not match config: {bad}")
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
