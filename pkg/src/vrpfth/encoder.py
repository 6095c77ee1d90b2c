"""GAT-Edge encoder: multi-head graph attention with edge-scaled scores and a residual sum.

All tensors carry a leading batch dimension: X is (B, N, F), A is (B, N, N) boolean,
e is (B, N, N).  Row i of A lists the out-neighbourhood that node i attends over.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn


class NodeEmbeddings(NamedTuple):
    h: torch.Tensor    # (B, N, D) = h1 + h2
    h1: torch.Tensor
    h2: torch.Tensor


@dataclass
class EncoderConfig:
    input_dim: int = 302
    embed_dim: int = 64
    heads: int = 4
    layers: int = 2
    use_edge_features: bool = True

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


def uniform_fan_in_(tensor: torch.Tensor, fan_in: int, generator=None) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.copy_(torch.rand(tensor.shape, generator=generator, dtype=tensor.dtype) * 2 * bound - bound)
    return tensor


def init_linear_(layer: nn.Linear, generator=None) -> None:
    uniform_fan_in_(layer.weight, layer.in_features, generator)
    if layer.bias is not None:
        uniform_fan_in_(layer.bias, layer.in_features, generator)


def attention_scores(wx: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
    """Raw scores ReLU(a . [W x_i || W x_j]) for every ordered pair.

    wx: (B, H, N, Dh) transformed node features; attn: (H, 2*Dh).  Returns (B, H, N, N).
    """
    dh = wx.shape[-1]
    src = torch.einsum("bhnd,hd->bhn", wx, attn[:, :dh])
    dst = torch.einsum("bhnd,hd->bhn", wx, attn[:, dh:])
    return torch.relu(src[..., :, None] + dst[..., None, :])


def edge_induced_attention(scores: torch.Tensor, edge_features: torch.Tensor,
                           adjacency: torch.Tensor) -> torch.Tensor:
    """softmax over j in N(i) of score_ij * e_ij.  scores (B, H, N, N); e, A (B, N, N)."""
    logits = scores * edge_features[:, None]
    logits = logits.masked_fill(~adjacency[:, None], float("-inf"))
    return torch.softmax(logits, dim=-1)


class GATEdgeLayer(nn.Module):
    def __init__(self, in_dim: int, embed_dim: int, heads: int, generator=None):
        super().__init__()
        if embed_dim % heads:
            raise ValueError(f"embed_dim {embed_dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.weight = nn.Parameter(torch.empty(heads, in_dim, self.head_dim))
        self.attn = nn.Parameter(torch.empty(heads, 2 * self.head_dim))
        self.merge = nn.Linear(heads * self.head_dim, embed_dim)
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        uniform_fan_in_(self.weight, self.weight.shape[1], generator)
        uniform_fan_in_(self.attn, self.attn.shape[1], generator)
        init_linear_(self.merge, generator)

    def heads_forward(self, x, adjacency, edge_features):
        """Per-head sigmoid outputs before the merge, (B, H, N, Dh)."""
        wx = torch.einsum("bnf,hfd->bhnd", x, self.weight)
        alpha = edge_induced_attention(attention_scores(wx, self.attn), edge_features, adjacency)
        return torch.sigmoid(alpha @ wx)

    def forward(self, x, adjacency, edge_features):
        if x.dim() != 3 or adjacency.shape != x.shape[:2] + (x.shape[1],) \
                or edge_features.shape != adjacency.shape:
            raise ValueError(f"shape mismatch: x {tuple(x.shape)}, A {tuple(adjacency.shape)}, "
                             f"e {tuple(edge_features.shape)}")
        if x.shape[-1] != self.weight.shape[1]:
            raise ValueError(f"feature dim {x.shape[-1]} != layer input dim {self.weight.shape[1]}")
        out = self.heads_forward(x, adjacency, edge_features)
        b, h, n, d = out.shape
        return self.merge(out.transpose(1, 2).reshape(b, n, h * d))


class GATEdgeEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, generator=None):
        super().__init__()
        self.config = config
        self.input_proj = nn.Linear(config.input_dim, config.embed_dim)
        self.layers = nn.ModuleList(
            GATEdgeLayer(config.embed_dim, config.embed_dim, config.heads) for _ in range(config.layers))
        self.reset_parameters(generator)

    def reset_parameters(self, generator=None):
        init_linear_(self.input_proj, generator)
        for layer in self.layers:
            layer.reset_parameters(generator)

    def forward(self, x, adjacency, edge_features) -> NodeEmbeddings:
        if not self.config.use_edge_features:
            edge_features = torch.ones_like(edge_features)
        hidden = self.input_proj(x)
        outs = []
        for layer in self.layers:
            hidden = layer(hidden, adjacency, edge_features)
            outs.append(hidden)
        h = outs[0] + outs[-1] if len(outs) > 1 else outs[0]
        return NodeEmbeddings(h, outs[0], outs[-1])


def encode(x, adjacency, edge_features, encoder: GATEdgeEncoder) -> NodeEmbeddings:
    return encoder(x, adjacency, edge_features)
