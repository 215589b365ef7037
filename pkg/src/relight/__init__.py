"""Degradation-aware conditional diffusion for low-light image enhancement."""

from .colormap import compute_color_map
from .data import DegradationSpec, PairedSample, load_paired_dataset, sample_patch, synth_degrade
from .metrics import MetricsReport, psnr, ssim
from .nets import DGNet, DegradationEncoder, Denoiser, ModelConfig, build_models, freeze
from .sampling import ddim_sample, ddim_step, sample
from .schedule import NoiseSchedule, StepSequence, build_schedule, forward_diffuse, select_substeps
from .training import (
    Checkpoint,
    EMA,
    TrainConfig,
    diffusion_loss,
    ema_update,
    joint_loss,
    l1_loss,
    lr_at,
    train_stage1,
    train_stage2,
)

__all__ = [
    "Checkpoint",
    "DGNet",
    "DegradationEncoder",
    "DegradationSpec",
    "Denoiser",
    "EMA",
    "MetricsReport",
    "ModelConfig",
    "NoiseSchedule",
    "PairedSample",
    "StepSequence",
    "TrainConfig",
    "build_models",
    "build_schedule",
    "compute_color_map",
    "ddim_sample",
    "ddim_step",
    "diffusion_loss",
    "ema_update",
    "forward_diffuse",
    "freeze",
    "joint_loss",
    "l1_loss",
    "load_paired_dataset",
    "lr_at",
    "psnr",
    "sample",
    "sample_patch",
    "select_substeps",
    "ssim",
    "synth_degrade",
    "train_stage1",
    "train_stage2",
]
