"""Tuning-free subject customization by coordinating three diffusion branches through masked self-attention."""

from .attention import attention_logits, masked_attention, sagi_fuse, salq_fuse
from .denoiser import AttentionTriplet, DenoiserConfig, ToyDenoiser, denoise_with_taps
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    cfg_predict,
    ddim_invert,
    ddim_sample,
    ddim_step,
    make_noise_schedule,
    markov_step,
    q_sample,
    training_loss,
)
from .pipeline import BranchBundle, BranchMasks, run_pipeline
from .schedule import PRESETS, ControlSchedule, EditDecision, edit_dispatch, validate_schedule

__all__ = [
    "AttentionTriplet",
    "BranchBundle",
    "BranchMasks",
    "ControlSchedule",
    "DenoiserConfig",
    "EditDecision",
    "NoiseSchedule",
    "PRESETS",
    "SamplerConfig",
    "ToyDenoiser",
    "attention_logits",
    "cfg_predict",
    "ddim_invert",
    "ddim_sample",
    "ddim_step",
    "denoise_with_taps",
    "edit_dispatch",
    "make_noise_schedule",
    "markov_step",
    "masked_attention",
    "q_sample",
    "run_pipeline",
    "sagi_fuse",
    "salq_fuse",
    "training_loss",
    "validate_schedule",
]
