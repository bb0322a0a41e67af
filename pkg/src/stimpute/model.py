"""Top-level imputation network and checkpoint archive."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import ExperimentConfig, config_from_dict
from .contrastive import MomentumContrast
from .data import GraphSpec, Normalization
from .denoiser import NoisePredictor
from .diffusion import NoiseSchedule, make_noise_schedule
from .encoder import ConditionalEncoder
from .graph import transition_matrices

CHECKPOINT_FORMAT = "stimpute-checkpoint"
CHECKPOINT_VERSION = 1


class ImputationModel(nn.Module):
    """Conditional encoder, noise predictor and (optionally) the contrastive heads.

    Parameter names are namespaced ``cond_enc.*``, ``noise_pred.*`` and
    ``ctr.query.*`` / ``ctr.key.*``.
    """

    def __init__(self, cfg: ExperimentConfig, n_nodes: int, length: int, adjacency):
        super().__init__()
        m, ab = cfg.model, cfg.ablation
        self.cond_enc = ConditionalEncoder(
            m.d, n_nodes, length, d_trend=m.d_trend, use_trend=ab.use_trend,
            use_season=ab.use_season, gcn_order=m.gcn_order, adaptive=m.adaptive,
            embed_dim=m.node_embed_dim,
        )
        self.noise_pred = NoisePredictor(
            m.d, n_nodes, cfg.diffusion.T, n_layers=m.n_layers, heads=m.heads, step_dim=m.step_dim,
            gcn_order=m.gcn_order, adaptive=m.adaptive, embed_dim=m.node_embed_dim,
            side_info=m.side_info,
        )
        c = cfg.contrastive
        self.ctr = (
            MomentumContrast(m.d, c.out_dim, c.queue_size, c.momentum, c.tau, c.dropout)
            if cfg.effective_alpha > 0 else None
        )
        self.register_buffer("adjacency", torch.as_tensor(np.asarray(adjacency), dtype=torch.float32))
        self.n_nodes, self.length = n_nodes, length

    def supports(self):
        return transition_matrices(self.adjacency)

    def condition(self, cond: torch.Tensor, supports=None) -> torch.Tensor:
        return self.cond_enc(cond, supports if supports is not None else self.supports())

    def forward(self, cond, x_t, t, return_features: bool = False):
        sup = self.supports()
        c_con = self.cond_enc(cond, sup)
        return self.noise_pred(cond, x_t, t, c_con, sup, return_features=return_features)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


@dataclass
class ModelParameters:
    """A model together with everything needed to resume or sample from it."""

    model: ImputationModel
    config: ExperimentConfig
    schedule: NoiseSchedule
    normalization: Normalization
    graph: GraphSpec
    trained: bool = False
    optimizer_state: dict | None = None
    history: list = field(default_factory=list)
    best_step: int | None = None


def build_model(cfg: ExperimentConfig, graph: GraphSpec, length: int) -> ImputationModel:
    return ImputationModel(cfg, graph.n_nodes, length, graph.adjacency)


def save_checkpoint(params: ModelParameters, path) -> None:
    g = params.graph
    archive = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "config_hash": params.config.config_hash(),
        "schedule": params.schedule.metadata(),
        "n_nodes": params.model.n_nodes,
        "length": params.model.length,
        "normalization": params.normalization.to_dict(),
        "graph": {
            "node_ids": [str(i) for i in g.node_ids],
            "adjacency": torch.as_tensor(g.adjacency, dtype=torch.float64),
            "distances": torch.as_tensor(g.distances, dtype=torch.float64),
        },
        "trained": bool(params.trained),
        "best_step": params.best_step,
        "state_dict": {k: v.detach().clone() for k, v in params.model.state_dict().items()},
        "optimizer": params.optimizer_state,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(archive, path)


def load_checkpoint(path) -> ModelParameters:
    archive = torch.load(path, map_location="cpu", weights_only=True)
    if archive.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint archive")
    if archive.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {archive.get('version')}")
    cfg = config_from_dict(archive["config"])
    if cfg.config_hash() != archive["config_hash"]:
        raise ValueError("checkpoint config hash does not match its embedded config")
    gd = archive["graph"]
    graph = GraphSpec(tuple(gd["node_ids"]), gd["distances"].numpy(), gd["adjacency"].numpy())
    model = ImputationModel(cfg, archive["n_nodes"], archive["length"], graph.adjacency)
    state = archive["state_dict"]
    model.to(next(iter(state.values())).dtype if state else torch.float32)
    model.load_state_dict(state)
    schedule = NoiseSchedule.from_metadata(archive["schedule"])
    return ModelParameters(
        model=model, config=cfg, schedule=schedule,
        normalization=Normalization.from_dict(archive["normalization"]), graph=graph,
        trained=archive["trained"], optimizer_state=archive["optimizer"],
        best_step=archive.get("best_step"),
    )


def schedule_for(cfg: ExperimentConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return make_noise_schedule(d.T, d.beta_1, d.beta_T, d.shape)
