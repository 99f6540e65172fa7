"""Noise schedules, forward noising, classifier-free guidance and deterministic DDIM."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor

from . import vocab
from .denoiser import AttentionTriplet, Override
from .errors import HookError, InvalidArgument, SingularSchedule

# (denoising step index, layer index, triplet, default output) -> replacement
StepHook = Callable[[int, int, AttentionTriplet, Tensor], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas_cum: np.ndarray

    @property
    def total_steps(self) -> int:
        return len(self.betas)

    def alpha(self, t: int) -> float:
        """Cumulative alpha at step ``t``; index -1 is the clean image (alpha = 1)."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.total_steps:
            raise InvalidArgument(f"step {t} outside [-1, {self.total_steps})")
        return float(self.alphas_cum[t])


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    inversion_guidance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidArgument("steps must be >= 0")
        if self.guidance_scale < 0 or self.inversion_guidance < 0:
            raise InvalidArgument("guidance scales must be >= 0")


def make_noise_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise InvalidArgument("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise InvalidArgument(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(betas=betas, alphas_cum=np.cumprod(1.0 - betas))


def markov_step(z_prev: Tensor, beta_t: float, noise: Tensor) -> Tensor:
    if noise.shape != z_prev.shape:
        raise InvalidArgument(f"noise shape {tuple(noise.shape)} != state shape {tuple(z_prev.shape)}")
    return math.sqrt(1.0 - beta_t) * z_prev + math.sqrt(beta_t) * noise


def _alpha_tensor(sched: NoiseSchedule, t, like: Tensor) -> Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (t.min() < 0 or t.max() >= sched.total_steps):
        raise InvalidArgument(f"step outside [0, {sched.total_steps})")
    a = torch.as_tensor(sched.alphas_cum, dtype=torch.float64)[t].to(like.dtype)
    if a.ndim == 1:
        a = a.reshape(-1, *([1] * (like.ndim - 1)))
    return a


def q_sample(z0: Tensor, t, noise: Tensor, sched: NoiseSchedule) -> Tensor:
    """Noise ``z0`` straight to step ``t`` (scalar or one step per batch row)."""
    if noise.shape != z0.shape:
        raise InvalidArgument("noise and z0 shapes differ")
    a = _alpha_tensor(sched, t, z0)
    return a.sqrt() * z0 + (1 - a).sqrt() * noise


def training_loss(model, z0: Tensor, t, noise: Tensor, tokens, sched: NoiseSchedule) -> Tensor:
    if noise.shape != z0.shape:
        raise InvalidArgument("noise and z0 shapes differ")
    ids = vocab.as_token_ids(tokens)
    pred = model(q_sample(z0, t, noise, sched), t, ids)
    return torch.mean((noise - pred) ** 2)


def cfg_predict(model, z: Tensor, t, tokens, s: float, override: Optional[Override] = None) -> Tensor:
    """Classifier-free guided noise prediction ``eps_u + s * (eps_c - eps_u)``.

    s == 1 and s == 0 are single passes so they return eps_c / eps_u exactly.
    """
    ids = vocab.as_token_ids(tokens)
    if ids.shape[0] == 1 and z.shape[0] > 1:
        ids = ids.expand(z.shape[0], -1)
    null = torch.full_like(ids, vocab.TOKEN_IDS[vocab.NULL])
    if s == 1:
        return model(z, t, ids, override=override)
    if s == 0:
        return model(z, t, null, override=override)
    B = z.shape[0]
    eps = model(torch.cat([z, z]), t, torch.cat([null, ids]), override=override)
    eps_u, eps_c = eps[:B], eps[B:]
    return eps_u + s * (eps_c - eps_u)


def ddim_step(z_t: Tensor, eps: Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> Tensor:
    """Deterministic (eta = 0) DDIM move from step ``t`` to ``t_prev``; either direction."""
    if t == t_prev:
        return z_t
    a_t, a_prev = sched.alpha(t), sched.alpha(t_prev)
    if a_t <= 0:
        raise SingularSchedule(f"alpha at step {t} is zero")
    z0_hat = (z_t - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
    return math.sqrt(a_prev) * z0_hat + math.sqrt(1 - a_prev) * eps


def sampling_timesteps(T: int, n: int) -> list[int]:
    """Ascending, uniformly spaced schedule steps used by an n-step sampler."""
    if not 0 <= n <= T:
        raise InvalidArgument(f"need 0 <= steps <= {T}")
    return [(i * T) // n for i in range(n)]


def denoising_pairs(T: int, n: int) -> list[tuple[int, int]]:
    """(t, t_prev) for denoising step index 0..n-1, noisiest first; t_prev = -1 is the clean image."""
    ts = sampling_timesteps(T, n)
    return [(ts[n - 1 - i], ts[n - 2 - i] if i < n - 1 else -1) for i in range(n)]


def _step_override(hook: Optional[StepHook], step: int) -> Optional[Override]:
    if hook is None:
        return None

    def override(layer, trip, out):
        try:
            return hook(step, layer, trip, out)
        except Exception as e:
            raise HookError(step, layer, e) from e

    return override


@torch.no_grad()
def ddim_sample(
    model,
    z_T: Tensor,
    tokens,
    config: SamplerConfig,
    sched: NoiseSchedule,
    hook: Optional[StepHook] = None,
) -> list[Tensor]:
    """Run ``config.steps`` DDIM steps from ``z_T``; returns every state, ``z_T`` first."""
    traj = [z_T]
    z = z_T
    for i, (t, t_prev) in enumerate(denoising_pairs(sched.total_steps, config.steps)):
        eps = cfg_predict(model, z, t, tokens, config.guidance_scale, _step_override(hook, i))
        z = ddim_step(z, eps, t, t_prev, sched)
        traj.append(z)
    return traj


@torch.no_grad()
def ddim_invert(model, z0: Tensor, tokens, config: SamplerConfig, sched: NoiseSchedule) -> list[Tensor]:
    """Deterministic DDIM inversion; returns ``[Z_T, ..., Z_0]`` aligned with sampler step order."""
    ts = sampling_timesteps(sched.total_steps, config.steps)
    states = [z0]
    z = z0
    prev = -1
    for t in ts:
        eps = cfg_predict(model, z, t, tokens, config.inversion_guidance)
        z = ddim_step(z, eps, prev, t, sched)
        states.append(z)
        prev = t
    return states[::-1]


def to_model_space(images: Tensor) -> Tensor:
    """[0, 1] pixels -> [-1, 1] model space."""
    return images * 2 - 1


def to_pixels(z: Tensor) -> Tensor:
    return ((z + 1) / 2).clamp(0, 1)
