"""Noise prediction network.

Stacked residual layers: conditional temporal attention, a spatial block of
attention plus graph convolution, a tanh/sigmoid gate and residual/skip
outputs. Queries and keys come from the conditional representation, values from
the noisy hidden state.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph import GraphConv


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    angles = positions.to(torch.float64).unsqueeze(-1) * freqs
    return torch.cat([angles.sin(), angles.cos()], dim=-1)


class DiffusionStepEmbedding(nn.Module):
    """Sinusoids of the step index followed by a shared two-layer projection."""

    def __init__(self, n_steps: int, dim: int = 128):
        super().__init__()
        self.register_buffer(
            "table", sinusoidal_embedding(torch.arange(n_steps + 1), dim).float(), persistent=False
        )
        self.proj1 = nn.Linear(dim, dim)
        self.proj2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        x = self.table.to(self.proj1.weight.dtype)[t]
        x = F.silu(self.proj1(x))
        return F.silu(self.proj2(x))


class ConditionalAttention(nn.Module):
    """Multi-head attention along one axis with Q, K from the condition and V from ``h``."""

    def __init__(self, d: int, heads: int, axis: str):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} is not divisible by {heads} heads")
        if axis not in ("temporal", "spatial"):
            raise ValueError(f"unknown attention axis {axis!r}")
        self.d, self.heads, self.axis = d, heads, axis
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.out = nn.Linear(d, d)

    # einsum subscripts: b batch, n/m nodes, l/j time, h heads, e head channels
    _SCORES = {"temporal": "bnlhe,bnjhe->bnhlj", "spatial": "bnlhe,bmlhe->blhnm"}
    _APPLY = {"temporal": "bnhlj,bnjhe->bnlhe", "spatial": "blhnm,bmlhe->bnlhe"}
    _APPLY_SHARED = {"temporal": "nhlj,bnjhe->bnlhe", "spatial": "lhnm,bmlhe->bnlhe"}

    def attention_weights(self, c: torch.Tensor) -> torch.Tensor:
        """Softmax weights, (B, N, H, L, L) for temporal or (B, L, H, N, N) for spatial."""
        b, n, l, _ = c.shape
        q = self.q(c).view(b, n, l, self.heads, -1)
        k = self.k(c).view(b, n, l, self.heads, -1)
        scores = torch.einsum(self._SCORES[self.axis], q, k) / math.sqrt(self.d)
        return torch.softmax(scores, dim=-1)

    def forward(self, c: torch.Tensor, h: torch.Tensor, return_weights: bool = False):
        """Tensors are (B, N, L, d). A condition with batch 1 is shared by every sample of ``h``."""
        b, n, l, _ = h.shape
        weights = self.attention_weights(c)
        v = self.v(h).view(b, n, l, self.heads, -1)
        if weights.shape[0] == 1 and b > 1:
            y = torch.einsum(self._APPLY_SHARED[self.axis], weights[0], v)
        else:
            y = torch.einsum(self._APPLY[self.axis], weights, v)
        y = self.out(y.reshape(b, n, l, self.d))
        return (y, weights) if return_weights else y


class SpatialBlock(nn.Module):
    """MLP(Norm(attn(h) + h) + Norm(gcn(h) + h))."""

    def __init__(self, d, heads, n_nodes, gcn_order=2, adaptive=True, embed_dim=10):
        super().__init__()
        self.attn = ConditionalAttention(d, heads, "spatial")
        self.gnn = GraphConv(d, n_nodes, order=gcn_order, adaptive=adaptive, embed_dim=embed_dim)
        self.norm_attn = nn.LayerNorm(d)
        self.norm_gnn = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))

    def graph_branch(self, h, supports):
        return self.norm_gnn(self.gnn(h, supports) + h)

    def forward(self, h, c, supports):
        a = self.norm_attn(self.attn(c, h) + h)
        return self.mlp(a + self.graph_branch(h, supports))


class ResidualLayer(nn.Module):
    def __init__(self, d, heads, n_nodes, step_dim, gcn_order=2, adaptive=True, embed_dim=10):
        super().__init__()
        self.step_proj = nn.Linear(step_dim, d)
        self.temporal = ConditionalAttention(d, heads, "temporal")
        self.spatial = SpatialBlock(d, heads, n_nodes, gcn_order, adaptive, embed_dim)
        self.mid = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, 2 * d)

    def forward(self, h, c, step, supports):
        y = h + self.step_proj(step)[:, None, None, :]
        y = y + self.temporal(c, y)
        y = self.spatial(y, c, supports)
        gate, filt = self.mid(y).chunk(2, dim=-1)
        y = torch.sigmoid(gate) * torch.tanh(filt)
        residual, skip = self.out(y).chunk(2, dim=-1)
        return (h + residual) / math.sqrt(2.0), skip


class NoisePredictor(nn.Module):
    def __init__(self, d: int, n_nodes: int, n_steps: int, n_layers: int = 4, heads: int = 8,
                 step_dim: int = 128, gcn_order: int = 2, adaptive: bool = True, embed_dim: int = 10,
                 side_info: bool = True):
        super().__init__()
        self.d = d
        self.input_proj = nn.Linear(2, d)
        self.step_embed = DiffusionStepEmbedding(n_steps, step_dim)
        self.side_info = side_info
        if side_info:
            self.node_embed = nn.Parameter(torch.randn(n_nodes, d) * 0.1)
        self.layers = nn.ModuleList(
            ResidualLayer(d, heads, n_nodes, step_dim, gcn_order, adaptive, embed_dim)
            for _ in range(n_layers)
        )
        self.skip_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, 1)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def embed_noisy_input(self, cond: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor):
        """(B, N, L) conditioner and noisy target -> hidden state (B, N, L, d) and step embedding."""
        if cond.shape != x_t.shape:
            raise ValueError(f"shape mismatch: {tuple(cond.shape)} vs {tuple(x_t.shape)}")
        h = self.input_proj(torch.stack([cond, x_t], dim=-1))
        return h, self.step_embed(t)

    def condition_with_side_info(self, c_con: torch.Tensor) -> torch.Tensor:
        if not self.side_info:
            return c_con
        _, n, l, d = c_con.shape
        pos = sinusoidal_embedding(torch.arange(l), d).to(c_con.dtype)
        return c_con + pos[None, None] + self.node_embed[None, :, None, :].to(c_con.dtype)

    def forward(self, cond, x_t, t, c_con, supports, return_features: bool = False):
        h, step = self.embed_noisy_input(cond, x_t, t)
        c = self.condition_with_side_info(c_con)
        skips, hidden = 0, []
        for layer in self.layers:
            h, skip = layer(h, c, step, supports)
            hidden.append(h)
            skips = skips + skip
        y = F.relu(self.skip_proj(skips / math.sqrt(len(self.layers))))
        eps_hat = self.out_proj(y).squeeze(-1)
        # one reduction on the output; per-layer scan only when something went wrong
        if not torch.isfinite(eps_hat.sum()):
            for i, hi in enumerate(hidden):
                if not torch.isfinite(hi).all():
                    raise FloatingPointError(f"non-finite activations in residual layer {i}")
            raise FloatingPointError("non-finite activations in the output head")
        return (eps_hat, h) if return_features else eps_hat
