"""Synthetic spatiotemporal data with a known trend / seasonal / noise decomposition."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .config import SynthConfig
from .data import Dataset, GraphSpec, build_adjacency, dataset_from_arrays, default_kernel_width


@dataclass
class SynthData:
    dataset: Dataset
    values: np.ndarray  # (N, n_steps) mixed series
    timestamps: list
    components: dict  # trend, seasonal, coupling, noise: each (N, n_steps)
    coords: np.ndarray


def random_geometric_graph(n: int, rng: np.random.Generator, threshold: float = 0.1):
    coords = rng.random((n, 2))
    dist = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    width = default_kernel_width(dist) if n > 1 else 1.0
    adj = build_adjacency(dist, width, threshold)
    return coords, GraphSpec(tuple(f"s{i}" for i in range(n)), dist, adj)


def synth_components(cfg: SynthConfig):
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, total = cfg.n_nodes, cfg.n_steps
    coords, graph = random_geometric_graph(n, rng, cfg.kernel_threshold)
    l = np.arange(total, dtype=float)

    slope = rng.normal(0.0, cfg.slope_scale, n) if cfg.slope_scale > 0 else np.zeros(n)
    offset = rng.normal(0.0, cfg.offset_scale, n) if cfg.offset_scale > 0 else np.zeros(n)
    trend = offset[:, None] + slope[:, None] * l[None, :]

    seasonal = np.zeros((n, total))
    for period, amp, phase in cfg.seasonal:
        jitter = rng.normal(0.0, cfg.phase_jitter, n) if cfg.phase_jitter > 0 else np.zeros(n)
        seasonal += amp * np.sin(2 * np.pi * l[None, :] / period + phase + jitter[:, None])

    own = trend + seasonal
    off = graph.adjacency.copy()
    np.fill_diagonal(off, 0.0)
    deg = off.sum(axis=1, keepdims=True)
    mix = np.divide(off, deg, out=np.zeros_like(off), where=deg > 0)
    coupling = cfg.spatial_coupling * (mix @ own)

    noise = rng.normal(0.0, cfg.noise_sigma, (n, total)) if cfg.noise_sigma > 0 else np.zeros((n, total))
    comps = {"trend": trend, "seasonal": seasonal, "coupling": coupling, "noise": noise}
    return comps, coords, graph


def synth_generate(cfg: SynthConfig, window_length: int = 48, stride: int | None = None,
                   train_frac: float = 0.7) -> SynthData:
    comps, coords, graph = synth_components(cfg)
    values = comps["trend"] + comps["seasonal"] + comps["coupling"] + comps["noise"]
    start = datetime.fromisoformat(cfg.start)
    stamps = [start + timedelta(minutes=cfg.step_minutes * i) for i in range(cfg.n_steps)]
    ds = dataset_from_arrays(values, stamps, graph, window_length, stride, train_frac, name="synthetic")
    return SynthData(ds, values, stamps, comps, coords)
