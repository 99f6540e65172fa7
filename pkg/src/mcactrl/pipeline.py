"""Three coordinated diffusion branches (subject, condition, target) under attention control.

All three branches are denoised in lockstep. At every self-attention layer of
every step the dispatcher picks global injection, local query or plain
attention for the target; the subject and condition branches always run plain
attention and only lend their Q/K/V.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from . import vocab
from .attention import sagi_fuse, salq_fuse
from .denoiser import AttentionTriplet, Taps, ToyDenoiser
from .diffusion import NoiseSchedule, SamplerConfig, ddim_step, denoising_pairs
from .errors import ConfigError
from .masks import MaskPyramid, build_pyramid, dilate, extract_cross_attention_mask, upsample_nearest
from .schedule import ControlSchedule, EditDecision, edit_dispatch, validate_schedule

BRANCHES = ("subject", "condition", "target")


@dataclass
class BranchBundle:
    """Starting noise and conditioning of the three branches; the target starts from the condition noise."""

    subject_start: Tensor
    condition_start: Tensor
    subject_tokens: Tensor
    condition_tokens: Tensor
    target_tokens: Tensor
    subject_trajectory: Optional[list[Tensor]] = None
    condition_trajectory: Optional[list[Tensor]] = None

    def __post_init__(self):
        if self.subject_start.shape != self.condition_start.shape:
            raise ConfigError("subject and condition states must share a shape")
        self.subject_tokens = vocab.as_token_ids(self.subject_tokens)
        self.condition_tokens = vocab.as_token_ids(self.condition_tokens)
        self.target_tokens = vocab.as_token_ids(self.target_tokens)

    @property
    def target_start(self) -> Tensor:
        return self.condition_start


@dataclass
class BranchMasks:
    """Subject mask pyramid plus either a fixed editable pyramid or a token to read it from.

    With ``editable_token`` set (text condition), the editable mask is recomputed
    every step from the condition branch's cross-attention to that token, then
    dilated.
    """

    subject: MaskPyramid
    editable: Optional[MaskPyramid] = None
    editable_token: Optional[int] = None
    dilation_iterations: int = 1
    threshold: float = 0.5

    def __post_init__(self):
        if (self.editable is None) == (self.editable_token is None):
            raise ConfigError("give exactly one of an editable mask pyramid or an editable token")


@dataclass
class PipelineResult:
    target: Tensor
    subject: Tensor
    condition: Tensor
    editable_masks: list[np.ndarray] = field(default_factory=list)  # per step, text mode only
    trajectories: Optional[dict[str, list[Tensor]]] = None


def _guidance_halves(s: float) -> list[bool]:
    """Which passes run: False = unconditional, True = conditional."""
    if s == 1:
        return [True]
    if s == 0:
        return [False]
    return [False, True]


def _combine(eps: dict[bool, Tensor], s: float) -> Tensor:
    if len(eps) == 1:
        return next(iter(eps.values()))
    return eps[False] + s * (eps[True] - eps[False])


class _Controller:
    """Builds the target-layer replacement for one step."""

    def __init__(self, step: int, schedule: ControlSchedule, masks: BranchMasks, editable: MaskPyramid,
                 printed_order: bool):
        self.step = step
        self.schedule = schedule
        self.masks = masks
        self.editable = editable
        self.printed_order = printed_order

    def decision(self, layer: int) -> EditDecision:
        return edit_dispatch(self.step, layer, self.schedule)

    def fuse(self, decision: EditDecision, tgt: AttentionTriplet, sub: AttentionTriplet,
             con: AttentionTriplet) -> Tensor:
        res = tgt.resolution
        m_s = self.masks.subject.flat(res, tgt.q.dtype)
        m_c = self.editable.flat(res, tgt.q.dtype)
        if decision is EditDecision.GLOBAL_INJECT:
            return sagi_fuse(sub, con, m_s, m_c, self.printed_order)
        return salq_fuse(tgt, sub, con, m_s, m_c, self.printed_order)


def _check_coverage(pyr: MaskPyramid, resolutions, what: str):
    missing = [r for r in resolutions if r not in pyr]
    if missing:
        raise ConfigError(f"{what} mask pyramid lacks attention resolutions {missing}")


def editable_from_cross_attention(
    model: ToyDenoiser, z_con: Tensor, t: int, tokens: Tensor, masks: BranchMasks
) -> tuple[np.ndarray, MaskPyramid]:
    """Editable mask for text mode from the condition branch's decoder cross-attention at step ``t``."""
    taps = Taps()
    with torch.no_grad():
        model(z_con, t, tokens, taps=taps)
    dec = [info.index for info in model.layers if info.decoder]
    maps = {l: taps.cross_attn[l][0] for l in dec}
    raw = extract_cross_attention_mask(
        maps, masks.editable_token, masks.threshold, layers=dec,
        prompt_length=len(vocab.decode(tokens[0].tolist()).split()),
    )
    H, W = z_con.shape[-2:]
    base = dilate(upsample_nearest(raw, H, W), masks.dilation_iterations)
    return base, build_pyramid(base, model.resolutions)


@torch.no_grad()
def run_pipeline(
    model: ToyDenoiser,
    sched: NoiseSchedule,
    bundle: BranchBundle,
    schedule: ControlSchedule,
    masks: BranchMasks,
    sampler: SamplerConfig,
    *,
    batched: bool = True,
    printed_order: bool = False,
    allow_reverse: bool = False,
    record: bool = False,
) -> PipelineResult:
    """Denoise the three branches together and return their final states.

    ``batched`` packs the branches into one forward pass (width 3 per guidance
    half); otherwise each branch runs alone and the target reads the recorded
    subject/condition taps. Both paths compute the same thing.
    """
    problems = validate_schedule(schedule, allow_reverse=allow_reverse)
    if problems:
        raise ConfigError("invalid control schedule: " + "; ".join(problems))
    if schedule.total_steps != sampler.steps:
        schedule = schedule.rescaled(sampler.steps)
    ctl = schedule.for_model(model.num_layers, model.decoder_start)
    _check_coverage(masks.subject, model.resolutions, "subject")
    if masks.editable is not None:
        _check_coverage(masks.editable, model.resolutions, "editable")

    z = [bundle.subject_start, bundle.condition_start, bundle.target_start]
    tokens = [bundle.subject_tokens, bundle.condition_tokens, bundle.target_tokens]
    null = torch.tensor([vocab.null_tokens(tokens[0].shape[-1])])
    halves = _guidance_halves(sampler.guidance_scale)
    s = sampler.guidance_scale
    result_masks = []
    traj = {b: [zi] for b, zi in zip(BRANCHES, z)} if record else None

    for i, (t, t_prev) in enumerate(denoising_pairs(sched.total_steps, sampler.steps)):
        editable = masks.editable
        if editable is None:
            base, editable = editable_from_cross_attention(model, z[1], t, tokens[1], masks)
            result_masks.append(base)
        ctrl = _Controller(i, ctl, masks, editable, printed_order)
        step_tokens = {h: [tk if h else null for tk in tokens] for h in halves}
        if batched:
            eps = _batched_eps(model, z, t, step_tokens, halves, ctrl)
        else:
            eps = _sequential_eps(model, z, t, step_tokens, halves, ctrl)
        z = [ddim_step(z[b], _combine({h: eps[h][b] for h in halves}, s), t, t_prev, sched) for b in range(3)]
        if traj is not None:
            for b, name in enumerate(BRANCHES):
                traj[name].append(z[b])

    return PipelineResult(target=z[2], subject=z[0], condition=z[1], editable_masks=result_masks,
                          trajectories=traj)


def _batched_eps(model, z, t, step_tokens, halves, ctrl: _Controller) -> dict[bool, list[Tensor]]:
    x = torch.cat([zi for _ in halves for zi in z])
    ids = torch.cat([tk for h in halves for tk in step_tokens[h]])

    def override(layer: int, trip: AttentionTriplet, out: Tensor) -> Tensor:
        decision = ctrl.decision(layer)
        if decision is EditDecision.STANDARD:
            return out
        out = out.clone()
        for g in range(len(halves)):
            sub, con, tgt = (trip.row(3 * g + b, BRANCHES[b]) for b in range(3))
            out[3 * g + 2] = ctrl.fuse(decision, tgt, sub, con)
        return out

    eps = model(x, t, ids, override=override)
    return {h: [eps[3 * g + b : 3 * g + b + 1] for b in range(3)] for g, h in enumerate(halves)}


def _sequential_eps(model, z, t, step_tokens, halves, ctrl: _Controller) -> dict[bool, list[Tensor]]:
    out: dict[bool, list[Tensor]] = {}
    for h in halves:
        tok = step_tokens[h]
        sub_taps, con_taps = Taps(), Taps()
        eps_sub = model(z[0], t, tok[0], taps=sub_taps)
        eps_con = model(z[1], t, tok[1], taps=con_taps)

        def override(layer: int, trip: AttentionTriplet, default: Tensor) -> Tensor:
            decision = ctrl.decision(layer)
            if decision is EditDecision.STANDARD:
                return default
            sub = sub_taps.self_attn[layer].row(0, "subject")
            con = con_taps.self_attn[layer].row(0, "condition")
            fused = ctrl.fuse(decision, trip.row(0, "target"), sub, con)
            return fused[None]

        eps_tgt = model(z[2], t, tok[2], override=override)
        out[h] = [eps_sub, eps_con, eps_tgt]
    return out
