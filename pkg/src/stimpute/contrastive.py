"""Momentum-contrast regulariser over pooled denoiser features."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ProjectionHead(nn.Module):
    """Residual MLP block followed by a projection to the embedding space."""

    def __init__(self, d: int, out_dim: int, dropout: float = 0.1):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, d)
        self.proj = nn.Linear(d, out_dim)

    def forward(self, x):
        x = self.dropout(x)
        x = x + self.fc2(F.gelu(self.fc1(x)))
        return self.proj(x)


def _unit(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms < 1e-12).any():
        raise ValueError("zero-norm embedding; pooled features are degenerate")
    return x / norms


def info_nce(q: torch.Tensor, k_pos: torch.Tensor, negatives: torch.Tensor | None, tau: float):
    """Mean over the batch of -log softmax weight of the positive pair."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if q.shape[0] == 0:
        raise ValueError("empty batch")
    pos = (q * k_pos).sum(dim=-1, keepdim=True) / tau
    if negatives is None or negatives.shape[0] == 0:
        logits = pos
    else:
        logits = torch.cat([pos, q @ negatives.t() / tau], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos.squeeze(1)).mean()


def total_loss(loss_rl, loss_cl, alpha: float):
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if alpha == 0:
        # keep the graph free of the contrastive branch
        return loss_rl
    return loss_rl + alpha * loss_cl


class MomentumContrast(nn.Module):
    def __init__(self, d: int, out_dim: int = 64, queue_size: int = 1024, momentum: float = 0.999,
                 tau: float = 0.07, dropout: float = 0.1):
        super().__init__()
        self.query = ProjectionHead(d, out_dim, dropout)
        self.key = ProjectionHead(d, out_dim, dropout)
        self.key.load_state_dict(self.query.state_dict())
        for p in self.key.parameters():
            p.requires_grad_(False)
        self.queue_size, self.momentum, self.tau = queue_size, momentum, tau
        self.register_buffer("queue", torch.zeros(queue_size, out_dim), persistent=False)
        self.register_buffer("queue_ptr", torch.zeros((), dtype=torch.long), persistent=False)
        self.register_buffer("queue_len", torch.zeros((), dtype=torch.long), persistent=False)

    def negatives(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        n = int(self.queue_len)
        if n < self.queue_size:
            return self.queue[:n]
        p = int(self.queue_ptr)
        return torch.cat([self.queue[p:], self.queue[:p]])

    def make_views(self, features: torch.Tensor):
        """Pool (B, N, L, d) features and embed them with both heads."""
        pooled = features.mean(dim=(1, 2))
        q = _unit(self.query(pooled))
        with torch.no_grad():
            k = _unit(self.key(pooled.detach()))
        return q, k

    def loss(self, features: torch.Tensor):
        q, k = self.make_views(features)
        return info_nce(q, k, self.negatives().to(q.dtype), self.tau), k

    @torch.no_grad()
    def momentum_update(self, m: float | None = None) -> None:
        m = self.momentum if m is None else m
        for pq, pk in zip(self.query.parameters(), self.key.parameters()):
            pk.mul_(m).add_(pq.detach(), alpha=1.0 - m)

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> None:
        b = keys.shape[0]
        if self.queue_size == 0:
            return
        if b > self.queue_size:
            raise ValueError(f"queue of {self.queue_size} cannot hold a batch of {b} keys")
        p = int(self.queue_ptr)
        idx = (torch.arange(b) + p) % self.queue_size
        self.queue[idx] = keys.to(self.queue.dtype)
        self.queue_ptr.fill_((p + b) % self.queue_size)
        self.queue_len.fill_(min(self.queue_size, int(self.queue_len) + b))

    def update_queue_and_momentum(self, new_keys: torch.Tensor, m: float | None = None) -> None:
        self.enqueue(new_keys)
        self.momentum_update(m)
