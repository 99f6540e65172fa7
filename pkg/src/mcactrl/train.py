"""Training loop for the toy denoiser."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import vocab
from .denoiser import DenoiserConfig, ToyDenoiser
from .diffusion import NoiseSchedule, training_loss
from .errors import InvalidArgument

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    warmup: int = 100
    p_uncond: float = 0.1
    hflip: bool = True
    seed: int = 0
    log_every: int = 100
    model: DenoiserConfig = field(default_factory=DenoiserConfig)


def images_to_tensor(images) -> torch.Tensor:
    """uint8 ``[N, H, W, 3]`` (or a list of them) -> float ``[N, 3, H, W]`` in [-1, 1]."""
    arr = np.stack(images) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = torch.from_numpy(arr.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()
    return x * 2 - 1


def smoothed(losses, window: int = 50) -> tuple[float, float]:
    """Mean of the first and of the last ``window`` losses."""
    if not losses:
        raise InvalidArgument("no losses recorded")
    w = min(window, len(losses))
    return float(np.mean(losses[:w])), float(np.mean(losses[-w:]))


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))


def train_toy_denoiser(
    dataset: list[tuple[np.ndarray, str]],
    config: TrainConfig,
    sched: NoiseSchedule,
) -> tuple[ToyDenoiser, list[float]]:
    """Fit eps-prediction on ``(image, caption)`` pairs; returns the model and per-step losses.

    Captions are replaced by the null caption with probability ``p_uncond`` so
    the same network serves as the unconditional branch of guidance.
    """
    if not dataset:
        raise InvalidArgument("dataset is empty")
    model = ToyDenoiser(config.model)
    if config.steps == 0:
        model.eval()
        return model, []
    x_all = images_to_tensor([img for img, _ in dataset])
    tok_all = torch.tensor([vocab.encode(cap, config.model.max_tokens) for _, cap in dataset])
    null = torch.tensor(vocab.null_tokens(config.model.max_tokens))
    g = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    T = sched.total_steps
    losses: list[float] = []
    model.train()
    for step in range(config.steps):
        for group in opt.param_groups:
            group["lr"] = _lr_at(step, config)
        idx = torch.randint(0, len(dataset), (config.batch_size,), generator=g)
        x0 = x_all[idx]
        tokens = tok_all[idx].clone()
        drop = torch.rand(config.batch_size, generator=g) < config.p_uncond
        tokens[drop] = null
        if config.hflip:
            flip = torch.rand(config.batch_size, generator=g) < 0.5
            x0 = torch.where(flip[:, None, None, None], x0.flip(-1), x0)
        t = torch.randint(0, T, (config.batch_size,), generator=g)
        noise = torch.randn(x0.shape, generator=g)
        loss = training_loss(model, x0, t, noise, tokens, sched)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if config.log_every and (step + 1) % config.log_every == 0:
            log.info("step %d loss %.4f", step + 1, np.mean(losses[-config.log_every:]))
    model.eval()
    return model, losses
