"""Diffusion-style graph convolution with an optional adaptive adjacency."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def transition_matrices(adjacency: torch.Tensor) -> list[torch.Tensor]:
    """Forward and backward random-walk matrices of a (possibly asymmetric) adjacency."""
    def row_normalize(a):
        deg = a.sum(dim=1, keepdim=True)
        return torch.where(deg > 0, a / deg.clamp_min(1e-12), torch.zeros_like(a))

    return [row_normalize(adjacency), row_normalize(adjacency.t())]


def propagate(x: torch.Tensor, support: torch.Tensor) -> torch.Tensor:
    """out[:, i] = sum_j support[i, j] * x[:, j] for x shaped (B, N, L, C)."""
    return torch.einsum("nm,bmlc->bnlc", support, x)


class GraphConv(nn.Module):
    """K-hop graph convolution over fixed supports plus a learned node-embedding graph.

    Each support contributes ``x, P x, P^2 x, ...`` up to ``order`` hops; the hop
    features are concatenated with ``x`` and mixed by a linear layer.
    """

    def __init__(self, channels, n_nodes, out_channels=None, order=2, adaptive=True, embed_dim=10):
        super().__init__()
        self.order = order
        self.adaptive = adaptive
        n_supports = 2 + int(adaptive)
        if adaptive:
            self.node_vec1 = nn.Parameter(torch.randn(n_nodes, embed_dim))
            self.node_vec2 = nn.Parameter(torch.randn(embed_dim, n_nodes))
        self.mix = nn.Linear((1 + order * n_supports) * channels, out_channels or channels)

    def adaptive_adjacency(self) -> torch.Tensor:
        return F.softmax(F.relu(self.node_vec1 @ self.node_vec2), dim=1)

    def supports(self, fixed: list[torch.Tensor]) -> list[torch.Tensor]:
        return list(fixed) + ([self.adaptive_adjacency()] if self.adaptive else [])

    def hop_matrices(self, fixed_supports: list[torch.Tensor]) -> torch.Tensor:
        """Identity followed by P, P^2, ... for every support, stacked (K, N, N)."""
        mats = []
        for p in self.supports(fixed_supports):
            h = p
            for _ in range(self.order):
                mats.append(h)
                h = h @ p
        eye = torch.eye(mats[0].shape[0], dtype=mats[0].dtype, device=mats[0].device)
        return torch.stack([eye] + mats)

    # above this many node-channels the folded (N*C)^2 weight stops paying off
    FOLD_LIMIT = 1024

    def forward(self, x: torch.Tensor, fixed_supports: list[torch.Tensor]) -> torch.Tensor:
        hops = self.hop_matrices(fixed_supports).to(x.dtype)
        b, n, l, c = x.shape
        if n * c > self.FOLD_LIMIT:
            feats = torch.einsum("knm,bmlc->bnlkc", hops, x).reshape(b, n, l, -1)
            return self.mix(feats)
        # sum_k P_k x W_k folded into one (N*C) x (N*O) matrix
        w = self.mix.weight.view(-1, hops.shape[0], c)  # (O, K, C)
        folded = torch.einsum("knm,okc->mcno", hops, w).reshape(n * c, -1)
        y = x.transpose(1, 2).reshape(b, l, n * c) @ folded
        return y.view(b, l, n, -1).transpose(1, 2) + self.mix.bias
