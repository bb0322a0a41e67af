"""Point and probabilistic imputation metrics, plus two sanity baselines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SpatioTemporalWindow, interpolate_rows

N_QUANTILES = 19
QUANTILE_LEVELS = np.arange(1, N_QUANTILES + 1) / 20.0  # 0.05, 0.10, ..., 0.95


@dataclass
class ImputationResult:
    samples: np.ndarray  # (S, N, L), original units
    point_estimate: np.ndarray  # (N, L) median over samples
    target_mask: np.ndarray
    metrics: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples: np.ndarray, target_mask: np.ndarray) -> "ImputationResult":
        samples = np.asarray(samples, dtype=float)
        return cls(samples, np.median(samples, axis=0), np.asarray(target_mask).astype(bool))


def _mask(pred, truth, mask):
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    mask = np.asarray(mask).astype(bool)
    if pred.shape != truth.shape or mask.shape != truth.shape:
        raise ValueError("pred, truth and mask must share a shape")
    if not mask.any():
        raise ValueError("metric mask is empty")
    return pred[mask], truth[mask]


def mae(pred, truth, mask) -> float:
    p, t = _mask(pred, truth, mask)
    return float(np.mean(np.abs(p - t)))


def mse(pred, truth, mask) -> float:
    p, t = _mask(pred, truth, mask)
    return float(np.mean((p - t) ** 2))


def quantile_ranks(n_samples: int) -> np.ndarray:
    """0-based order-statistic index of each level: the ceil(alpha * S)-th smallest."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    i = np.arange(1, N_QUANTILES + 1)
    # integer ceil(i * S / 20) avoids 0.15 * 100 = 15.000000000000002
    return -(-i * n_samples // 20) - 1


def crps_cells(samples: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Discretised CRPS of each cell; ``samples`` has the ensemble on axis 0."""
    samples = np.asarray(samples, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if samples.shape[0] == 0:
        raise ValueError("empty sample set")
    q = np.sort(samples, axis=0)[quantile_ranks(samples.shape[0])]
    levels = QUANTILE_LEVELS.reshape((-1,) + (1,) * truth.ndim)
    loss = (levels - (truth < q)) * (truth - q)
    return 2.0 * loss.sum(axis=0) / N_QUANTILES


def crps_single(samples, x: float) -> float:
    return float(crps_cells(np.asarray(samples, dtype=float).reshape(-1), np.asarray(x, dtype=float)))


def crps_aggregate(samples, truth, mask) -> float:
    """Mean CRPS over masked cells of (S, N, L) samples against (N, L) truth."""
    samples = np.asarray(samples, dtype=float)
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("metric mask is empty")
    return float(crps_cells(samples[:, mask], np.asarray(truth, dtype=float)[mask]).mean())


def score(result: ImputationResult, truth, mask=None) -> dict:
    mask = result.target_mask if mask is None else mask
    return {
        "mae": mae(result.point_estimate, truth, mask),
        "mse": mse(result.point_estimate, truth, mask),
        "crps": crps_aggregate(result.samples, truth, mask),
        "n_target_cells": int(np.asarray(mask).astype(bool).sum()),
    }


def baseline_impute(window: SpatioTemporalWindow, method: str, fill_value=None) -> np.ndarray:
    """MEAN or LINEAR imputation of a window, in the window's units.

    Observed cells are returned unchanged. Nodes without any observation fall
    back to ``fill_value`` (default: the mean of all observed cells).
    """
    obs = window.observed_mask.astype(bool)
    vals = np.where(obs, window.values, np.nan)
    if fill_value is None:
        fill_value = float(np.nanmean(vals)) if obs.any() else 0.0
    if method == "mean":
        counts = obs.sum(axis=1)
        sums = np.where(obs, window.values, 0.0).sum(axis=1)
        node_mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.broadcast_to(fill_value, counts.shape))
        return np.where(obs, window.values, node_mean[:, None])
    if method == "linear":
        filled = interpolate_rows(np.where(obs, window.values, 0.0), obs, fill_value)
        return np.where(obs, window.values, filled)
    raise ValueError(f"unknown baseline {method!r}")
