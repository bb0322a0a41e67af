"""Command-line entry point.

Every subcommand accepts ``--config FILE`` plus one ``--<dotted.key> VALUE``
flag per configuration leaf. Results are printed as JSON on stdout; failures
print a JSON error object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, apply_overrides, leaf_keys, load_config, save_config

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dest(key: str) -> str:
    return "cfg__" + key.replace(".", "__")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config")
    g = p.add_argument_group("config overrides (values parsed as YAML)")
    for key, default in leaf_keys():
        g.add_argument(f"--{key}", dest=_dest(key), metavar="V", default=None,
                       help=f"default: {json.dumps(default)}")


def _config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else (base or ExperimentConfig())
    overrides = {key: getattr(args, _dest(key)) for key, _ in leaf_keys()
                 if getattr(args, _dest(key), None) is not None}
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def cmd_synth(args) -> dict:
    from .data import write_adjacency_csv, write_values_csv
    from .synth import synth_generate

    cfg = _config(args)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sd = synth_generate(cfg.synth, cfg.data.window_length, cfg.data.stride, cfg.data.train_frac)
    graph = sd.dataset.graph
    write_values_csv(out / "values.csv", graph.node_ids, sd.timestamps, sd.values)
    write_adjacency_csv(out / "adjacency.csv", graph.adjacency)
    np.savez_compressed(out / "components.npz", coords=sd.coords, **sd.components)
    save_config(cfg, out / "config.yaml")
    return {
        "values": str(out / "values.csv"),
        "adjacency": str(out / "adjacency.csv"),
        "components": str(out / "components.npz"),
        "n_nodes": int(sd.values.shape[0]),
        "n_steps": int(sd.values.shape[1]),
        "n_windows": len(sd.dataset),
    }


def cmd_train(args) -> dict:
    from .experiment import train_only, training_summary

    cfg = _config(args)
    params = train_only(cfg)
    return {
        "checkpoint": str(Path(cfg.output_dir) / "checkpoint.pt"),
        "config_hash": cfg.config_hash(),
        **training_summary(params),
    }


def _checkpoint_config(args):
    from .model import load_checkpoint

    params = load_checkpoint(args.checkpoint)
    cfg = _config(args, base=params.config)
    return params, cfg


def cmd_impute(args) -> dict:
    from dataclasses import replace

    from .data import split_chronological
    from .experiment import load_data
    from .training import impute, mask_window

    params, cfg = _checkpoint_config(args)
    data = replace(load_data(cfg), normalization=params.normalization)
    if args.split == "all":
        windows = data.windows
    else:
        parts = split_chronological(data, cfg.data.train_frac, cfg.data.valid_frac)
        windows = parts[("train", "valid", "test").index(args.split)].windows
    windows = windows[: args.max_windows or len(windows)]
    rng = np.random.default_rng([cfg.seed, 3])
    samples, medians, targets, starts = [], [], [], []
    for i, w in enumerate(windows):
        if args.pattern != "missing":
            w = mask_window(w, args.pattern, cfg, rng)
        res = impute(w, params, n_samples=args.n_samples or cfg.eval.n_samples, seed=cfg.seed * 100_003 + i)
        samples.append(res.samples)
        medians.append(res.point_estimate)
        targets.append(res.target_mask)
        starts.append(w.timestamps[0].isoformat())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out, samples=np.stack(samples), median=np.stack(medians),
                        target_mask=np.stack(targets), window_start=np.array(starts))
    return {"output": str(out), "n_windows": len(windows), "n_target_cells": int(np.sum(targets))}


def cmd_eval(args) -> dict:
    from .experiment import evaluate_checkpoint

    params, cfg = _checkpoint_config(args)
    del params
    records = evaluate_checkpoint(args.checkpoint, cfg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for pattern, record in records.items():
            (out / f"metrics_{pattern}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return records


def cmd_report(args) -> dict:
    from .report import emit_report

    run = Path(args.run)
    report = json.loads((run / "metrics.json").read_text())
    log_file = run / "train_log.jsonl"
    history = [json.loads(line) for line in log_file.read_text().splitlines() if line] if log_file.exists() else None
    files = emit_report(report, run, history=history)
    return {"files": [str(f) for f in files]}


def cmd_run(args) -> dict:
    from .experiment import run_experiment

    return run_experiment(_config(args))


def cmd_ablate(args) -> dict:
    from .experiment import ABLATIONS, run_ablation

    variants = args.variants or list(ABLATIONS)
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise UsageError(f"unknown ablation variants {unknown}; choose from {list(ABLATIONS)}")
    return run_ablation(_config(args), variants)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stimpute", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset as CSV files")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory (default: output_dir)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("impute", help="draw imputation ensembles from a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output .npz")
    p.add_argument("--pattern", choices=["missing", "point", "block"], default="missing",
                   help="impute genuinely missing cells or apply an evaluation mask first")
    p.add_argument("--split", choices=["train", "valid", "test", "all"], default="test")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--max-windows", type=int)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="directory for metrics_<pattern>.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="rewrite metrics files and figures of a finished run")
    p.add_argument("--run", required=True, help="run directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="train, impute and evaluate one configuration")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run the full model and its ablation variants")
    _add_config_flags(p)
    p.add_argument("--variants", nargs="+", help="subset of variants to run")
    p.set_defaults(func=cmd_ablate)
    return parser


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (KeyError, ValueError, FileNotFoundError) as exc:
        return _fail("invalid_input", exc, EXIT_FAILURE)
    except Exception as exc:  # noqa: BLE001 - reported as JSON, never a bare traceback
        logging.getLogger(__name__).debug("command failed", exc_info=True)
        return _fail("runtime", exc, EXIT_FAILURE)
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
