"""Noise schedules and the elementary forward/reverse diffusion steps.

The step functions work on numpy arrays and torch tensors alike. Step index
``t`` is 1-based; ``alpha_bar[0]`` is the t=0 value 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_1: float
    beta_T: float
    shape: str
    beta: np.ndarray  # beta[t-1] is beta_t
    alpha: np.ndarray
    alpha_bar: np.ndarray  # length T+1, alpha_bar[0] == 1
    sigma2: np.ndarray  # sigma2[t-1] is sigma^2_t

    def metadata(self) -> dict:
        return {"T": self.T, "beta_1": self.beta_1, "beta_T": self.beta_T, "shape": self.shape}

    def same_as(self, other: "NoiseSchedule") -> bool:
        return self.metadata() == other.metadata()

    @classmethod
    def from_metadata(cls, meta: dict) -> "NoiseSchedule":
        return make_noise_schedule(meta["T"], meta["beta_1"], meta["beta_T"], meta["shape"])


def make_noise_schedule(T: int, beta_1: float = 1e-4, beta_T: float = 0.2,
                        shape: str = "quadratic") -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0 < beta_1 <= beta_T < 1):
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    if shape == "linear":
        beta = np.linspace(beta_1, beta_T, T)
    elif shape == "quadratic":
        beta = np.linspace(math.sqrt(beta_1), math.sqrt(beta_T), T) ** 2
    else:
        raise ValueError(f"unknown schedule shape {shape!r}")
    # linspace endpoints can drift by an ulp after squaring
    beta[0], beta[-1] = beta_1, beta_T
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    sigma2 = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta
    for a in (beta, alpha, alpha_bar, sigma2):
        a.setflags(write=False)
    return NoiseSchedule(T, float(beta_1), float(beta_T), shape, beta, alpha, alpha_bar, sigma2)


def _check_t(t: int, schedule: NoiseSchedule, lo: int) -> None:
    if not lo <= t <= schedule.T:
        raise ValueError(f"step {t} outside [{lo}, {schedule.T}]")


def forward_sample(x0, t: int, eps, schedule: NoiseSchedule):
    """Closed-form draw of x_t given x0 and standard normal ``eps``."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    _check_t(t, schedule, 0)
    ab = float(schedule.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def forward_sample_batch(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                         schedule: NoiseSchedule) -> torch.Tensor:
    """Per-sample version of :func:`forward_sample`; ``t`` has shape (B,)."""
    ab = torch.tensor(schedule.alpha_bar, dtype=x0.dtype, device=x0.device)[t]
    ab = ab.view(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def _standard_normal_like(x, rng):
    if isinstance(x, torch.Tensor):
        return torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
    rng = rng if rng is not None else np.random.default_rng()
    return rng.standard_normal(np.shape(x))


def reverse_step(x_t, eps_hat, t: int, schedule: NoiseSchedule, rng=None, z=None):
    """One ancestral sampling step x_t -> x_{t-1}.

    ``rng`` is a numpy ``Generator`` for arrays or a ``torch.Generator`` for
    tensors; ``z`` overrides the drawn noise. No noise is added at t=1.
    """
    _check_t(t, schedule, 1)
    a = float(schedule.alpha[t - 1])
    b = float(schedule.beta[t - 1])
    ab = float(schedule.alpha_bar[t])
    mean = (x_t - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    if t == 1:
        return mean
    if z is None:
        z = _standard_normal_like(x_t, rng)
    return mean + math.sqrt(float(schedule.sigma2[t - 1])) * z


def masked_noise_loss(eps, eps_hat, target_mask):
    """Mean squared noise error over target cells only.

    Works batched: every axis of ``target_mask`` is reduced.
    """
    if tuple(eps.shape) != tuple(eps_hat.shape) or tuple(eps.shape) != tuple(target_mask.shape):
        raise ValueError("eps, eps_hat and target_mask must share a shape")
    if isinstance(eps, torch.Tensor):
        mask = target_mask.to(eps.dtype)
        count = mask.sum()
        if count.item() == 0:
            raise ValueError("target mask is empty")
        # where() instead of multiplying keeps non-target cells out of the sum bit-for-bit
        resid = torch.where(mask > 0, eps - eps_hat, torch.zeros_like(eps))
        return (resid ** 2).sum() / count
    mask = np.asarray(target_mask).astype(bool)
    if not mask.any():
        raise ValueError("target mask is empty")
    resid = (np.asarray(eps) - np.asarray(eps_hat))[mask]
    return float(np.mean(resid ** 2))
