import sys
from datetime import datetime, timedelta

import numpy as np
import pytest
import torch

from stimpute.config import ExperimentConfig, apply_overrides
from stimpute.data import GraphSpec, SpatioTemporalWindow


def stamps(n, step_minutes=15, start=datetime(2024, 1, 1)):
    return [start + timedelta(minutes=step_minutes * i) for i in range(n)]


def make_window(values, observed=None, target=None, step_minutes=15):
    values = np.asarray(values, dtype=float)
    obs = np.isfinite(values).astype(np.int8) if observed is None else np.asarray(observed, dtype=np.int8)
    tgt = np.zeros_like(obs) if target is None else np.asarray(target, dtype=np.int8)
    return SpatioTemporalWindow(values, obs, tgt, tuple(stamps(values.shape[1], step_minutes)), step_minutes)


def line_graph(n=3):
    dist = np.abs(np.subtract.outer(np.arange(n), np.arange(n))).astype(float)
    adj = np.where(dist <= 1, np.exp(-dist**2), 0.0)
    return GraphSpec(tuple(f"n{i}" for i in range(n)), dist, adj)


def tiny_config(**overrides) -> ExperimentConfig:
    """Small enough to train a few steps in well under a second."""
    base = {
        "model.d": 8, "model.heads": 2, "model.n_layers": 1, "model.step_dim": 16,
        "diffusion.T": 10, "contrastive.queue_size": 16, "contrastive.out_dim": 8,
        "optim.batch_size": 4, "optim.steps": 5, "optim.valid_every": 5, "optim.valid_batches": 1,
        "synth.n_nodes": 3, "synth.n_steps": 480, "data.window_length": 24,
        "eval.n_samples": 4, "eval.max_windows": 2,
    }
    base.update(overrides)
    return apply_overrides(ExperimentConfig(), base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n][1])
