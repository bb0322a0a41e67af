"""Training loop and ensemble imputation."""

from __future__ import annotations

import copy
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .contrastive import total_loss
from .data import (
    Dataset,
    SpatioTemporalWindow,
    apply_block_mask,
    apply_point_mask,
    block_lengths_for,
    interpolate_rows,
)
from .diffusion import NoiseSchedule, forward_sample_batch, masked_noise_loss, reverse_step
from .evaluation import ImputationResult
from .model import ModelParameters, build_model, schedule_for

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def mask_window(window: SpatioTemporalWindow, pattern: str, cfg: ExperimentConfig,
                rng: np.random.Generator) -> SpatioTemporalWindow:
    m = cfg.mask
    if pattern == "point":
        return apply_point_mask(window, m.point_rate, rng)
    if pattern == "block":
        lo, hi = block_lengths_for(window.step_minutes, m.block_min_hours, m.block_max_hours)
        return apply_block_mask(window, rng, m.block_point_rate, m.block_start_prob, lo, hi)
    raise ValueError(f"unknown mask pattern {pattern!r}")


def _batch_tensors(windows, norm, dtype):
    """Normalised values, conditioner and masks for a list of masked windows."""
    vals, conds, obs, tgt = [], [], [], []
    for w in windows:
        o = w.observed_mask.astype(bool)
        z = norm.normalize(np.where(w.ground_truth_mask, w.values, 0.0))
        z = np.where(w.ground_truth_mask, z, 0.0)
        vals.append(z)
        conds.append(interpolate_rows(z, o, 0.0))
        obs.append(o)
        tgt.append(w.target_mask.astype(bool))
    as_t = lambda a: torch.as_tensor(np.stack(a), dtype=dtype)
    return as_t(vals), as_t(conds), as_t(obs), as_t(tgt)


def _loss(model, cond, x0, target, t, eps, schedule, alpha):
    x_t = forward_sample_batch(x0, t, eps, schedule) * target
    eps_hat, feats = model(cond, x_t, t, return_features=True)
    loss_rl = masked_noise_loss(eps, eps_hat, target)
    keys = None
    loss_cl = torch.zeros((), dtype=loss_rl.dtype)
    if alpha > 0 and model.ctr is not None:
        loss_cl, keys = model.ctr.loss(feats)
    return total_loss(loss_rl, loss_cl, alpha), loss_rl, loss_cl, keys


def _draw_batch(windows, size, pattern, cfg, norm, rng, gen, schedule, dtype):
    for _ in range(100):
        idx = rng.integers(len(windows), size=size)
        masked = [mask_window(windows[i], pattern, cfg, rng) for i in idx]
        x0, cond, _, target = _batch_tensors(masked, norm, dtype)
        if target.sum() > 0:
            break
    else:
        raise TrainingError("masking produced no imputation targets in 100 attempts")
    t = torch.randint(1, schedule.T + 1, (size,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
    return cond, x0, target, t, eps


def validation_loss(model, valid: Dataset, cfg, schedule, norm, dtype=torch.float32) -> float:
    """Masked noise loss over a fixed, seed-determined set of validation batches."""
    rng = np.random.default_rng(cfg.seed + 7919)
    gen = torch.Generator().manual_seed(cfg.seed + 7919)
    patterns = _patterns(cfg)
    was_training = model.training
    model.eval()
    losses = []
    with torch.no_grad():
        for b in range(cfg.optim.valid_batches):
            batch = _draw_batch(valid.windows, cfg.optim.batch_size, patterns[b % len(patterns)],
                                cfg, norm, rng, gen, schedule, dtype)
            _, loss_rl, _, _ = _loss(model, *batch, schedule, 0.0)
            losses.append(float(loss_rl))
    model.train(was_training)
    return float(np.mean(losses))


def _patterns(cfg):
    s = cfg.mask.train_strategy
    return ["point", "block"] if s == "mixed" else [s]


def train(train_set: Dataset, valid_set: Dataset | None, cfg: ExperimentConfig,
          log_path=None, dtype=torch.float32) -> ModelParameters:
    """Fit the imputation model.

    Each step masks a batch of training windows (point and block masks
    alternate under the ``mixed`` strategy), noises the target cells at a random
    step and regresses the noise. The contrastive term is added with weight
    ``alpha``. With a validation set, the best-scoring weights are kept.
    """
    cfg.validate()
    if len(train_set) == 0:
        raise TrainingError("training set is empty")
    if train_set.graph is None:
        raise TrainingError("training requires a graph")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)

    schedule = schedule_for(cfg)
    length = train_set.windows[0].length
    model = build_model(cfg, train_set.graph, length).to(dtype)
    model.train()
    opt_cfg = cfg.optim
    opt = torch.optim.Adam(model.trainable_parameters(), lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, opt_cfg.steps))
             if opt_cfg.cosine else None)
    alpha = cfg.effective_alpha
    norm = train_set.normalization
    patterns = _patterns(cfg)

    history, best, best_state, best_step = [], math.inf, None, None
    log_file = open(log_path, "w") if log_path else None
    try:
        for step in range(1, opt_cfg.steps + 1):
            batch = _draw_batch(train_set.windows, opt_cfg.batch_size, patterns[(step - 1) % len(patterns)],
                                cfg, norm, rng, gen, schedule, dtype)
            loss, loss_rl, loss_cl, keys = _loss(model, *batch, schedule, alpha)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"loss diverged at step {step}: loss_rl={loss_rl.item()}, loss_cl={loss_cl.item()}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if opt_cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), opt_cfg.grad_clip)
            lr = opt.param_groups[0]["lr"]
            opt.step()
            if sched is not None:
                sched.step()
            if keys is not None:
                model.ctr.update_queue_and_momentum(keys)
            record = {"step": step, "loss_rl": loss_rl.item(), "loss_cl": loss_cl.item(), "lr": lr}
            if valid_set is not None and opt_cfg.valid_every and (
                step % opt_cfg.valid_every == 0 or step == opt_cfg.steps
            ):
                v = validation_loss(model, valid_set, cfg, schedule, norm, dtype)
                record["valid_loss"] = v
                if v < best:
                    best, best_step = v, step
                    best_state = copy.deepcopy(model.state_dict())
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
            if step % 100 == 0:
                log.info("step %d loss_rl %.4f loss_cl %.4f", step, record["loss_rl"], record["loss_cl"])
    finally:
        if log_file:
            log_file.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return ModelParameters(
        model=model, config=cfg, schedule=schedule, normalization=norm, graph=train_set.graph,
        trained=True, optimizer_state=opt.state_dict(), history=history, best_step=best_step,
    )


@torch.no_grad()
def sample_ensemble(params: ModelParameters, window: SpatioTemporalWindow, n_samples: int,
                    generator: torch.Generator) -> np.ndarray:
    """Run the reverse chain ``n_samples`` times; returns normalised target draws (S, N, L)."""
    model, schedule = params.model, params.schedule
    dtype = next(model.parameters()).dtype
    norm = params.normalization
    obs = window.observed_mask.astype(bool)
    target = torch.as_tensor(window.target_mask.astype(bool), dtype=dtype)
    z = norm.normalize(np.where(obs, window.values, 0.0))
    cond1 = torch.as_tensor(interpolate_rows(np.where(obs, z, 0.0), obs, 0.0), dtype=dtype)
    cond = cond1.expand(n_samples, -1, -1).contiguous()
    sup = model.supports()
    # condition computed once; attention shares its weights across the ensemble
    c_con = model.cond_enc(cond1[None], sup)
    x = torch.randn((n_samples, *window.shape), generator=generator, dtype=dtype) * target
    for t in range(schedule.T, 0, -1):
        tt = torch.full((n_samples,), t, dtype=torch.long)
        eps_hat = model.noise_pred(cond, x, tt, c_con, sup)
        x = reverse_step(x, eps_hat, t, schedule, generator) * target
    return x.numpy().astype(float)


def impute(window: SpatioTemporalWindow, params: ModelParameters, n_samples: int = 100,
           seed: int = 0, schedule: NoiseSchedule | None = None) -> ImputationResult:
    """Draw an imputation ensemble for every target cell of ``window``.

    If the window has no target cells, every unobserved cell is imputed.
    Observed cells are copied into every sample unchanged.
    """
    if not params.trained:
        raise TrainingError("model parameters are untrained")
    if schedule is not None and not schedule.same_as(params.schedule):
        raise ValueError("requested noise schedule differs from the checkpoint's schedule")
    if window.shape != (params.model.n_nodes, params.model.length):
        raise ValueError(f"window shape {window.shape} does not match the model")
    if not window.target_mask.any():
        window = _all_missing_as_target(window)
    params.model.eval()
    gen = torch.Generator().manual_seed(seed)
    draws = sample_ensemble(params, window, n_samples, gen)
    obs = window.observed_mask.astype(bool)
    tgt = window.target_mask.astype(bool)
    mean = params.normalization.mean[:, None]
    std = params.normalization.std[:, None]
    samples = np.full(draws.shape, np.nan)
    samples[:, tgt] = (draws * std + mean)[:, tgt]
    samples[:, obs] = window.values[obs]
    return ImputationResult.from_samples(samples, tgt)


def _all_missing_as_target(window: SpatioTemporalWindow) -> SpatioTemporalWindow:
    from dataclasses import replace

    tgt = (~window.observed_mask.astype(bool)).astype(np.int8)
    return replace(window, target_mask=tgt)


def write_log(history: list, path) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in history))
