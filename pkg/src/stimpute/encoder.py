"""Conditional representation built from the interpolated observations.

Pipeline: lift to d channels, split into a causal-convolution trend branch and
a frequency-domain seasonal branch, concatenate, then mix over the graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph import GraphConv


@dataclass
class ConditionalRepresentation:
    c_in: torch.Tensor
    c_trend: torch.Tensor | None
    c_season: torch.Tensor | None
    c_tem: torch.Tensor
    c_spa: torch.Tensor
    c_con: torch.Tensor


def n_trend_experts(length: int) -> int:
    if length < 2:
        raise ValueError("trend extraction needs at least two time steps")
    return int(math.floor(math.log2(length / 2))) + 1


class TrendExperts(nn.Module):
    """Average of causal convolutions with kernel sizes 1, 2, 4, ..., 2^M."""

    def __init__(self, in_channels: int, out_channels: int, length: int):
        super().__init__()
        self.kernel_sizes = [2 ** m for m in range(n_trend_experts(length))]
        self.experts = nn.ModuleList(
            nn.Conv1d(in_channels, out_channels, k) for k in self.kernel_sizes
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, l, c = x.shape
        seq = x.reshape(b * n, l, c).transpose(1, 2)
        outs = [conv(F.pad(seq, (k - 1, 0))) for conv, k in zip(self.experts, self.kernel_sizes)]
        y = torch.stack(outs).mean(dim=0)
        return y.transpose(1, 2).reshape(b, n, l, -1)


class FourierLayer(nn.Module):
    """Per-frequency complex affine map applied between rfft and irfft along time."""

    def __init__(self, in_channels: int, out_channels: int, length: int):
        super().__init__()
        self.length = length
        self.n_freqs = length // 2 + 1
        weight = torch.empty(self.n_freqs, in_channels, out_channels, dtype=torch.cfloat)
        bias = torch.empty(self.n_freqs, out_channels, dtype=torch.cfloat)
        nn.init.kaiming_uniform_(weight, a=math.sqrt(5))
        bound = 1 / math.sqrt(in_channels)
        nn.init.uniform_(bias, -bound, bound)
        self.weight = nn.Parameter(torch.view_as_real(weight))
        self.bias = nn.Parameter(torch.view_as_real(bias))

    def set_identity(self) -> None:
        f, i, o, _ = self.weight.shape
        if i != o:
            raise ValueError("identity needs equal input and output channels")
        with torch.no_grad():
            self.weight.zero_()
            self.weight[..., 0] = torch.eye(i, dtype=self.weight.dtype).expand(f, i, i)
            self.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[2] != self.length:
            raise ValueError(f"layer built for length {self.length}, got {x.shape[2]}")
        spec = torch.fft.rfft(x, dim=2)
        w = torch.view_as_complex(self.weight).to(spec.dtype)
        bias = torch.view_as_complex(self.bias).to(spec.dtype)
        out = torch.einsum("bnfi,fio->bnfo", spec, w) + bias
        return torch.fft.irfft(out, n=self.length, dim=2)


class ConditionalEncoder(nn.Module):
    def __init__(self, d: int, n_nodes: int, length: int, d_trend: int | None = None,
                 use_trend: bool = True, use_season: bool = True, gcn_order: int = 2,
                 adaptive: bool = True, embed_dim: int = 10):
        super().__init__()
        if not (use_trend or use_season):
            raise ValueError("at least one of the trend and season branches must be enabled")
        if not use_season:
            d_trend = d
        elif not use_trend:
            d_trend = 0
        elif d_trend is None:
            d_trend = d // 2
        d_season = d - d_trend
        if (use_trend and d_trend <= 0) or (use_season and d_season <= 0):
            raise ValueError(f"cannot split d={d} into trend={d_trend} and season={d_season}")
        self.d, self.d_trend, self.d_season = d, d_trend, d_season
        self.embed = nn.Linear(1, d)
        self.trend = TrendExperts(d, d_trend, length) if use_trend else None
        self.season = FourierLayer(d, d_season, length) if use_season else None
        self.gnn = GraphConv(d, n_nodes, order=gcn_order, adaptive=adaptive, embed_dim=embed_dim)
        self.norm = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))

    def embed_conditioner(self, cond: torch.Tensor) -> torch.Tensor:
        """(B, N, L) interpolated values -> (B, N, L, d)."""
        return self.embed(cond.unsqueeze(-1))

    def forward(self, cond: torch.Tensor, supports, full: bool = False):
        c_in = self.embed_conditioner(cond)
        c_trend = self.trend(c_in) if self.trend is not None else None
        c_season = self.season(c_in) if self.season is not None else None
        c_tem = torch.cat([c for c in (c_trend, c_season) if c is not None], dim=-1)
        c_spa = self.gnn(c_tem, supports)
        c_con = self.mlp(self.norm(c_spa + c_tem))
        if full:
            return ConditionalRepresentation(c_in, c_trend, c_season, c_tem, c_spa, c_con)
        return c_con
