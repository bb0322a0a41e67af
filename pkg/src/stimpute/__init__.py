"""Diffusion-based spatiotemporal imputation with trend/season conditioning."""

from .config import ExperimentConfig, SynthConfig, apply_overrides, load_config, save_config
from .data import Dataset, GraphSpec, SpatioTemporalWindow, load_dataset, split_chronological
from .diffusion import NoiseSchedule, forward_sample, make_noise_schedule, masked_noise_loss, reverse_step
from .evaluation import ImputationResult, crps_aggregate, crps_single, mae, mse
from .experiment import run_ablation, run_experiment
from .model import ImputationModel, ModelParameters, load_checkpoint, save_checkpoint
from .report import emit_report
from .synth import synth_generate
from .training import impute, train

__version__ = "0.1.0"
