"""Experiment configuration.

Configs are nested dataclasses serialised as YAML. Every leaf is addressable by
a dotted key (``model.d``, ``diffusion.beta_T``) for command-line overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml


@dataclass
class SynthConfig:
    n_nodes: int = 8
    n_steps: int = 4800  # total series length; windows are cut from it
    step_minutes: int = 15
    slope_scale: float = 2e-4  # per-node slope ~ N(0, slope_scale^2), units/step
    offset_scale: float = 1.0
    # (period in steps, amplitude, phase in radians)
    seasonal: list = field(default_factory=lambda: [[96, 1.0, 0.0], [24, 0.5, 0.5]])
    phase_jitter: float = 0.3  # per-node phase offset std, radians
    noise_sigma: float = 0.1
    spatial_coupling: float = 0.5
    kernel_threshold: float = 0.1
    seed: int = 0
    start: str = "2024-01-01T00:00:00"

    def validate(self) -> None:
        if self.n_nodes < 1 or self.n_steps < 2 or self.step_minutes < 1:
            raise ValueError("n_nodes, n_steps and step_minutes must be positive (n_steps >= 2)")
        for term in self.seasonal:
            period, amp, _ = term
            if period < 2:
                raise ValueError(f"seasonal period must be >= 2, got {period}")
            if not float(amp) == float(amp) or abs(float(amp)) == float("inf"):
                raise ValueError("seasonal amplitudes must be finite")
        if not 0 <= self.spatial_coupling <= 1:
            raise ValueError("spatial_coupling must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


@dataclass
class DataConfig:
    source: str = "synth"  # "synth" or "files"
    values_path: Optional[str] = None
    adjacency_path: Optional[str] = None
    window_length: int = 48
    stride: Optional[int] = None
    train_frac: float = 0.7
    valid_frac: float = 0.1
    kernel_width: Optional[float] = None
    threshold: float = 0.1


@dataclass
class MaskConfig:
    train_strategy: str = "mixed"  # "point", "block" or "mixed" (alternate per batch)
    point_rate: float = 0.25
    block_point_rate: float = 0.05
    block_start_prob: float = 0.0015
    block_min_hours: float = 1.0
    block_max_hours: float = 4.0
    eval_patterns: list = field(default_factory=lambda: ["point", "block"])


@dataclass
class ModelConfig:
    d: int = 64
    d_trend: Optional[int] = None
    n_layers: int = 4
    heads: int = 8
    step_dim: int = 128
    gcn_order: int = 2
    adaptive: bool = True
    node_embed_dim: int = 10
    side_info: bool = True


@dataclass
class DiffusionConfig:
    T: int = 50
    beta_1: float = 1e-4
    beta_T: float = 0.2
    shape: str = "quadratic"


@dataclass
class ContrastiveConfig:
    alpha: float = 0.1
    tau: float = 0.07
    queue_size: int = 1024
    momentum: float = 0.999
    out_dim: int = 64
    dropout: float = 0.1


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    cosine: bool = True
    batch_size: int = 16
    steps: int = 2000
    valid_every: int = 200
    valid_batches: int = 4
    grad_clip: Optional[float] = 1.0


@dataclass
class AblationConfig:
    use_cl: bool = True
    use_trend: bool = True
    use_season: bool = True


@dataclass
class EvalConfig:
    n_samples: int = 100
    max_windows: Optional[int] = None


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    threads: Optional[int] = None
    output_dir: str = "runs/experiment"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if not (self.ablation.use_trend or self.ablation.use_season):
            raise ValueError("cannot disable both the trend and the season branch")
        if self.model.d % self.model.heads:
            raise ValueError(f"model.d={self.model.d} not divisible by heads={self.model.heads}")
        if self.mask.train_strategy not in ("point", "block", "mixed"):
            raise ValueError(f"unknown mask.train_strategy {self.mask.train_strategy!r}")
        for p in self.mask.eval_patterns:
            if p not in ("point", "block"):
                raise ValueError(f"unknown evaluation mask pattern {p!r}")
        if self.contrastive.alpha < 0:
            raise ValueError("contrastive.alpha must be nonnegative")
        if self.data.source not in ("synth", "files"):
            raise ValueError(f"unknown data.source {self.data.source!r}")
        if self.data.source == "files" and not (self.data.values_path and self.data.adjacency_path):
            raise ValueError("data.values_path and data.adjacency_path are required for file data")
        self.synth.validate()

    @property
    def effective_alpha(self) -> float:
        return self.contrastive.alpha if self.ablation.use_cl else 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Digest of everything that affects results (output location excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("threads")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, data: dict | None):
    data = dict(data or {})
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data.pop(f.name)
        sub = _dataclass_type(cls, f.name)
        kwargs[f.name] = _build(sub, value) if sub is not None else value
    if data:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(data)}")
    return cls(**kwargs)


def _dataclass_type(cls, name):
    default = getattr(cls(), name)
    return type(default) if dataclasses.is_dataclass(default) else None


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def leaf_keys(obj=None, prefix: str = "") -> list[tuple[str, Any]]:
    """Dotted keys and default values of every leaf field."""
    obj = obj if obj is not None else ExperimentConfig()
    out = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.extend(leaf_keys(value, key + "."))
        else:
            out.append((key, value))
    return out


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Return a copy with dotted-key overrides applied; string values are YAML-parsed."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        if isinstance(value, str):
            value = yaml.safe_load(value)
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            if p not in node or not isinstance(node[p], dict):
                raise KeyError(f"unknown config key {key!r}")
            node = node[p]
        if leaf not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[leaf] = value
    return config_from_dict(data)
