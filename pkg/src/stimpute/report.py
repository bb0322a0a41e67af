"""Metrics files and figures for a finished run."""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema
import numpy as np

METRIC_RECORD_SCHEMA = {
    "type": "object",
    "required": ["dataset", "mask_pattern", "mae", "mse", "crps", "n_target_cells", "seed", "config_hash"],
    "properties": {
        "dataset": {"type": "string"},
        "mask_pattern": {"enum": ["point", "block"]},
        "mae": {"type": "number", "minimum": 0},
        "mse": {"type": "number", "minimum": 0},
        "crps": {"type": "number", "minimum": 0},
        "n_target_cells": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "config_hash": {"type": "string"},
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["name", "config_hash", "seed", "metrics", "training"],
    "properties": {
        "name": {"type": "string"},
        "config_hash": {"type": "string"},
        "seed": {"type": "integer"},
        "metrics": {"type": "object", "additionalProperties": METRIC_RECORD_SCHEMA},
        "training": {"type": "object"},
    },
}


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def emit_report(report: dict, out_dir, history=None, arrays: dict | None = None) -> list[Path]:
    """Write ``metrics.json``, one ``metrics_<pattern>.json`` per pattern and the figures.

    Imputation arrays default to the ``imputations_<pattern>.npz`` files in
    ``out_dir``.
    """
    validate_report(report)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "metrics.json"]
    _dump(report, written[0])
    for pattern, record in report["metrics"].items():
        p = out / f"metrics_{pattern}.json"
        _dump(record, p)
        written.append(p)
    if history:
        written.append(plot_loss_curves(history, out / "loss_curves.png"))
    for pattern in report["metrics"]:
        data = (arrays or {}).get(pattern)
        if data is None:
            f = out / f"imputations_{pattern}.npz"
            if not f.exists():
                continue
            with np.load(f) as z:
                data = {k: z[k] for k in z.files}
        written.append(plot_overlay(data, out / f"overlay_{pattern}.png", title=f"{pattern} masking"))
    return written


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curves(history: list, path) -> Path:
    plt = _pyplot()
    steps = [r["step"] for r in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r["loss_rl"] for r in history], lw=0.8, label="noise loss")
    if any(r.get("loss_cl", 0.0) for r in history):
        ax.plot(steps, [r["loss_cl"] for r in history], lw=0.8, label="contrastive loss")
    v = [(r["step"], r["valid_loss"]) for r in history if "valid_loss" in r]
    if v:
        ax.plot(*zip(*v), "o-", label="validation noise loss")
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_overlay(data: dict, path, title: str = "", max_nodes: int = 4) -> Path:
    """Observed, true and median values plus the 5-95% ensemble band for the first window.

    Shows the nodes with the most target cells. Without samples the band is
    left out and the stored point estimate is drawn.
    """
    plt = _pyplot()
    truth = data["truth"][0]
    tm = data["target_mask"][0].astype(bool)
    obs = data["observed_mask"][0].astype(bool) if "observed_mask" in data else ~tm
    samples = data.get("samples")
    s = samples[0] if samples is not None and samples.ndim == 4 and samples.shape[1] > 0 else None
    if s is not None:
        point = np.nanmedian(s, axis=0)
    elif "point_estimate" in data:
        point = data["point_estimate"][0]
    else:
        point = None
    nodes = np.argsort(-tm.sum(axis=1), kind="stable")[:max_nodes]
    fig, axes = plt.subplots(len(nodes), 1, figsize=(8, 2 * len(nodes)), sharex=True, squeeze=False)
    x = np.arange(truth.shape[1])
    for ax, n in zip(axes[:, 0], nodes):
        ax.plot(x, truth[n], "k-", lw=0.8, alpha=0.6, label="true")
        ax.plot(x[obs[n]], truth[n, obs[n]], "k.", ms=3, label="observed")
        on_target = np.where(tm[n], 1.0, np.nan)
        if s is not None and tm[n].any():
            lo, hi = np.quantile(s[:, n][:, tm[n]], [0.05, 0.95], axis=0)
            band_lo = np.full(x.shape, np.nan)
            band_hi = np.full(x.shape, np.nan)
            band_lo[tm[n]], band_hi[tm[n]] = lo, hi
            ax.fill_between(x, band_lo, band_hi, color="C0", alpha=0.3, label="5-95%")
        if point is not None:
            ax.plot(x, point[n] * on_target, "C0x", ms=4, label="median")
        ax.set_ylabel(f"node {n}")
    axes[0, 0].set_title(title)
    axes[0, 0].legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
