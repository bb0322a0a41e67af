"""End-to-end runs: data -> split -> train -> impute -> score, plus ablations."""

from __future__ import annotations

import json
import logging
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import evaluation
from .config import ExperimentConfig, apply_overrides, save_config
from .data import Dataset, load_dataset, split_chronological, split_manifest, write_split_manifest
from .model import ModelParameters, load_checkpoint, save_checkpoint
from .synth import synth_generate
from .training import impute, mask_window, train, write_log

log = logging.getLogger(__name__)

ABLATIONS = {
    "full": {},
    "w/o CL": {"ablation.use_cl": False},
    "w/o TFD": {"ablation.use_trend": False},
    "w/o SFD": {"ablation.use_season": False},
}


def load_data(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "synth":
        return synth_generate(cfg.synth, d.window_length, d.stride, d.train_frac).dataset
    return load_dataset(d.values_path, d.adjacency_path, d.window_length, d.stride,
                        d.train_frac, d.kernel_width, d.threshold)


def _set_threads(cfg: ExperimentConfig) -> None:
    if cfg.threads:
        torch.set_num_threads(cfg.threads)


def evaluate(params: ModelParameters, test: Dataset, pattern: str, cfg: ExperimentConfig | None = None,
             n_samples: int | None = None, max_windows: int | None = None):
    """Mask every test window with ``pattern``, impute it and pool the scores.

    Returns the metrics record and the per-window arrays used for plotting.
    """
    cfg = cfg or params.config
    n_samples = n_samples or cfg.eval.n_samples
    windows = test.windows[: max_windows or cfg.eval.max_windows or len(test.windows)]
    rng = np.random.default_rng([cfg.seed, {"point": 1, "block": 2}[pattern]])
    fill = params.normalization.mean
    pooled = {"model": [], "linear": [], "mean": []}
    samples_all, points_all, truth_all, masks_all, observed_all = [], [], [], [], []
    for i, w in enumerate(windows):
        mw = mask_window(w, pattern, cfg, rng)
        tm = mw.target_mask.astype(bool)
        if not tm.any():
            continue
        res = impute(mw, params, n_samples=n_samples, seed=cfg.seed * 100_003 + i)
        truth = w.values
        pooled["model"].append((res.point_estimate[tm], res.samples[:, tm], truth[tm]))
        for name in ("linear", "mean"):
            base = evaluation.baseline_impute(mw, name, fill_value=fill)
            pooled[name].append((base[tm], base[None, tm], truth[tm]))
        samples_all.append(res.samples)
        points_all.append(res.point_estimate)
        truth_all.append(truth)
        masks_all.append(tm)
        observed_all.append(mw.observed_mask.astype(bool))
    if not pooled["model"]:
        raise RuntimeError(f"{pattern} masking produced no targets on the test split")

    def metrics(parts):
        pred = np.concatenate([p for p, _, _ in parts])
        samples = np.concatenate([s for _, s, _ in parts], axis=1)
        truth = np.concatenate([t for _, _, t in parts])
        ones = np.ones_like(truth, dtype=bool)
        return {
            "mae": evaluation.mae(pred, truth, ones),
            "mse": evaluation.mse(pred, truth, ones),
            "crps": evaluation.crps_aggregate(samples, truth, ones),
        }

    model_m = metrics(pooled["model"])
    record = {
        "dataset": test.name,
        "mask_pattern": pattern,
        **model_m,
        "n_target_cells": int(sum(m.sum() for m in masks_all)),
        "seed": cfg.seed,
        "n_samples": n_samples,
        "n_windows": len(masks_all),
        "config_hash": cfg.config_hash(),
        "baselines": {name: metrics(pooled[name]) for name in ("linear", "mean")},
    }
    arrays = {
        "samples": np.stack(samples_all),
        "point_estimate": np.stack(points_all),
        "truth": np.stack(truth_all),
        "target_mask": np.stack(masks_all),
        "observed_mask": np.stack(observed_all),
    }
    return record, arrays


def training_summary(params: ModelParameters) -> dict:
    h = params.history
    return {
        "steps": len(h),
        "best_step": params.best_step,
        "final_loss_rl": h[-1]["loss_rl"] if h else None,
        "final_loss_cl": h[-1]["loss_cl"] if h else None,
        "max_abs_loss_cl": max((abs(r["loss_cl"]) for r in h), default=0.0),
        "best_valid_loss": min((r["valid_loss"] for r in h if "valid_loss" in r), default=None),
    }


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Train and evaluate one configuration, writing every artefact under ``output_dir``.

    On failure a ``FAILED.json`` marker with the error is left next to whatever
    was already written, and the exception is re-raised.
    """
    from .report import emit_report

    cfg.validate()
    _set_threads(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED.json").unlink(missing_ok=True)
    started = time.time()
    try:
        save_config(cfg, out / "config.yaml")
        data = load_data(cfg)
        write_split_manifest(out / "split.json", split_manifest(data, cfg.data.train_frac, cfg.data.valid_frac))
        train_set, valid_set, test_set = split_chronological(data, cfg.data.train_frac, cfg.data.valid_frac)
        params = train(train_set, valid_set, cfg, log_path=out / "train_log.jsonl")
        save_checkpoint(params, out / "checkpoint.pt")
        results = {}
        for pattern in cfg.mask.eval_patterns:
            record, arrays = evaluate(params, test_set, pattern, cfg)
            results[pattern] = record
            np.savez_compressed(out / f"imputations_{pattern}.npz", **arrays)
        report = {
            "name": cfg.name,
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "ablation": {
                "use_cl": cfg.ablation.use_cl,
                "use_trend": cfg.ablation.use_trend,
                "use_season": cfg.ablation.use_season,
            },
            "training": training_summary(params),
            "metrics": results,
        }
        emit_report(report, out, history=params.history)
        (out / "runtime.json").write_text(json.dumps({"seconds": time.time() - started}))
        return report
    except Exception as exc:
        (out / "FAILED.json").write_text(json.dumps({
            "error": type(exc).__name__,
            "message": str(exc),
            "traceback": traceback.format_exc(),
        }, indent=2))
        raise


def run_ablation(cfg: ExperimentConfig, variants=None) -> dict:
    """Run the full model and each ablation variant in sibling output directories."""
    base = Path(cfg.output_dir)
    variants = variants or list(ABLATIONS)
    summary = {}
    for name in variants:
        slug = name.replace("/", "").replace(" ", "_").lower()
        vcfg = apply_overrides(cfg, {**ABLATIONS[name], "output_dir": str(base / slug), "name": f"{cfg.name}-{slug}"})
        report = run_experiment(vcfg)
        summary[name] = {
            "output_dir": str(base / slug),
            "config_hash": report["config_hash"],
            "metrics": {p: {k: r[k] for k in ("mae", "mse", "crps", "n_target_cells")}
                        for p, r in report["metrics"].items()},
            "max_abs_loss_cl": report["training"]["max_abs_loss_cl"],
        }
    base.mkdir(parents=True, exist_ok=True)
    (base / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def evaluate_checkpoint(checkpoint, cfg: ExperimentConfig | None = None, patterns=None) -> dict:
    params = load_checkpoint(checkpoint)
    cfg = cfg or params.config
    data = load_data(cfg)
    data = replace(data, normalization=params.normalization)
    _, _, test_set = split_chronological(data, cfg.data.train_frac, cfg.data.valid_frac)
    return {p: evaluate(params, test_set, p, cfg)[0] for p in (patterns or cfg.mask.eval_patterns)}


def train_only(cfg: ExperimentConfig) -> ModelParameters:
    cfg.validate()
    _set_threads(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    data = load_data(cfg)
    train_set, valid_set, _ = split_chronological(data, cfg.data.train_frac, cfg.data.valid_frac)
    params = train(train_set, valid_set, cfg, log_path=out / "train_log.jsonl")
    save_checkpoint(params, out / "checkpoint.pt")
    write_log(params.history, out / "train_log.jsonl")
    return params
