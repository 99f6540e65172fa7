"""A small text-conditioned U-Net whose self-attention layers can be tapped and overridden.

Self-attention layers are numbered in execution order, encoder first. Every
self-attention layer calls the active override (if any) with its Q/K/V and the
default per-head output, and uses whatever comes back in place of that output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import vocab
from .errors import ContractViolation, InvalidArgument


@dataclass
class AttentionTriplet:
    """Q/K/V of one self-attention layer, shaped ``[..., heads, tokens, d]``.

    Inside a forward pass the leading dim is the batch; ``row(i)`` strips it.
    """

    q: Tensor
    k: Tensor
    v: Tensor
    layer: int
    resolution: tuple[int, int]
    branch: Optional[str] = None

    def __post_init__(self):
        if not (self.q.shape[:-2] == self.k.shape[:-2] == self.v.shape[:-2]):
            raise InvalidArgument("q, k, v must share leading (batch/head) dims")
        if self.k.shape[-2] != self.v.shape[-2]:
            raise InvalidArgument("k and v must have the same token count")
        if self.q.shape[-1] != self.k.shape[-1] or self.q.shape[-1] == 0:
            raise InvalidArgument("q and k must share a positive head dim")

    @property
    def tokens(self) -> int:
        return self.q.shape[-2]

    def row(self, i: int, branch: Optional[str] = None) -> "AttentionTriplet":
        return AttentionTriplet(self.q[i], self.k[i], self.v[i], self.layer, self.resolution, branch)


# (layer index, triplet, default output) -> replacement output of the same shape
Override = Callable[[int, AttentionTriplet, Tensor], Tensor]


@dataclass
class Taps:
    """Recorded activations of one forward pass."""

    self_attn: dict[int, AttentionTriplet] = field(default_factory=dict)
    cross_attn: dict[int, Tensor] = field(default_factory=dict)  # [B, heads, N, T]


@dataclass(frozen=True)
class LayerInfo:
    index: int
    resolution: tuple[int, int]
    heads: int
    head_dim: int
    decoder: bool


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 16
    attn_channels: int = 32
    heads: int = 2
    head_dim: int = 16
    token_dim: int = 32
    max_tokens: int = vocab.MAX_TOKENS
    blocks_per_stage: int = 2
    seed: int = 0


class _Context:
    __slots__ = ("override", "taps")

    def __init__(self, override: Optional[Override], taps: Optional[Taps]):
        self.override = override
        self.taps = taps


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int, heads: int, head_dim: int, info: LayerInfo):
        super().__init__()
        self.heads, self.head_dim, self.info = heads, head_dim, info
        self.norm = nn.GroupNorm(8, channels)
        self.to_qkv = nn.Linear(channels, 3 * heads * head_dim, bias=False)
        self.to_out = nn.Linear(heads * head_dim, channels)

    def forward(self, x: Tensor, ctx: _Context) -> Tensor:
        B, C, H, W = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = (
            t.reshape(B, H * W, self.heads, self.head_dim).transpose(1, 2)
            for t in self.to_qkv(h).chunk(3, dim=-1)
        )
        if self.training and ctx.override is None and ctx.taps is None:
            out = F.scaled_dot_product_attention(q, k, v)
        else:
            out = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1) @ v
        if ctx.override is not None or ctx.taps is not None:
            trip = AttentionTriplet(q, k, v, self.info.index, (H, W))
            if ctx.taps is not None:
                ctx.taps.self_attn[self.info.index] = trip
            if ctx.override is not None:
                new = ctx.override(self.info.index, trip, out)
                if not isinstance(new, Tensor) or new.shape != out.shape:
                    got = tuple(new.shape) if isinstance(new, Tensor) else type(new).__name__
                    raise ContractViolation(
                        f"override at layer {self.info.index} returned {got}, expected {tuple(out.shape)}"
                    )
                out = new.to(out.dtype)
        out = out.transpose(1, 2).reshape(B, H * W, self.heads * self.head_dim)
        return x + self.to_out(out).transpose(1, 2).reshape(B, C, H, W)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, token_dim: int, heads: int, head_dim: int, index: int):
        super().__init__()
        self.heads, self.head_dim, self.index = heads, head_dim, index
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, heads * head_dim, bias=False)
        self.to_kv = nn.Linear(token_dim, 2 * heads * head_dim, bias=False)
        self.to_out = nn.Linear(heads * head_dim, channels)

    def forward(self, x: Tensor, context: Tensor, ctx: _Context) -> Tensor:
        B, C, H, W = x.shape
        T = context.shape[1]
        h = self.norm(x).flatten(2).transpose(1, 2)
        q = self.to_q(h).reshape(B, H * W, self.heads, self.head_dim).transpose(1, 2)
        k, v = (
            t.reshape(B, T, self.heads, self.head_dim).transpose(1, 2)
            for t in self.to_kv(context).chunk(2, dim=-1)
        )
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        if ctx.taps is not None:
            ctx.taps.cross_attn[self.index] = probs
        out = (probs @ v).transpose(1, 2).reshape(B, H * W, self.heads * self.head_dim)
        return x + self.to_out(out).transpose(1, 2).reshape(B, C, H, W)


class Block(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int, cfg: DenoiserConfig, info: LayerInfo):
        super().__init__()
        self.res = ResBlock(cin, cout, tdim)
        self.attn = SelfAttention(cout, cfg.heads, cfg.head_dim, info)
        self.cross = CrossAttention(cout, cfg.token_dim, cfg.heads, cfg.head_dim, info.index)

    def forward(self, x, temb, context, ctx):
        x = self.res(x, temb)
        x = self.attn(x, ctx)
        return self.cross(x, context, ctx)


class ToyDenoiser(nn.Module):
    """Noise predictor eps(x_t, t, tokens) on ``image_size`` RGB images in [-1, 1].

    Two attention resolutions (size/2 and size/4); ``blocks_per_stage`` blocks
    per stage on each side of the bottleneck.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        if cfg.image_size % 4:
            raise InvalidArgument("image_size must be divisible by 4")
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self._build()

    def _build(self):
        cfg = self.cfg
        c0, c1 = cfg.base_channels, cfg.attn_channels
        tdim = 4 * c0
        r1, r2 = cfg.image_size // 2, cfg.image_size // 4
        n = cfg.blocks_per_stage
        self.token_emb = nn.Embedding(len(vocab.TOKENS), cfg.token_dim)
        self.pos_emb = nn.Parameter(torch.randn(cfg.max_tokens, cfg.token_dim) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(c0, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)

        infos = []
        for i, (res, dec) in enumerate([(r1, False)] * n + [(r2, False)] * n + [(r2, True)] * n + [(r1, True)] * n):
            infos.append(LayerInfo(i, (res, res), cfg.heads, cfg.head_dim, dec))
        self.layers: tuple[LayerInfo, ...] = tuple(infos)

        self.enc1 = nn.ModuleList(Block(c1, c1, tdim, cfg, infos[i]) for i in range(n))
        self.enc2 = nn.ModuleList(Block(c1, c1, tdim, cfg, infos[n + i]) for i in range(n))
        self.mid = ResBlock(c1, c1, tdim)
        self.dec2 = nn.ModuleList(
            Block(2 * c1 if i == 0 else c1, c1, tdim, cfg, infos[2 * n + i]) for i in range(n)
        )
        self.up2 = nn.Conv2d(c1, c1, 3, padding=1)
        self.dec1 = nn.ModuleList(
            Block(2 * c1 if i == 0 else c1, c1, tdim, cfg, infos[3 * n + i]) for i in range(n)
        )
        self.up1 = nn.Conv2d(c1, c0, 3, padding=1)
        self.out_res = ResBlock(2 * c0, c0, tdim)
        self.out_norm = nn.GroupNorm(8, c0)
        self.conv_out = nn.Conv2d(c0, cfg.in_channels, 3, padding=1)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def decoder_start(self) -> int:
        return next(info.index for info in self.layers if info.decoder)

    @property
    def resolutions(self) -> list[tuple[int, int]]:
        return sorted({info.resolution for info in self.layers}, reverse=True)

    def encode_tokens(self, tokens) -> Tensor:
        ids = vocab.as_token_ids(tokens, self.cfg.max_tokens)
        return self.token_emb(ids) + self.pos_emb

    def forward(
        self,
        x: Tensor,
        t,
        tokens,
        override: Optional[Override] = None,
        taps: Optional[Taps] = None,
    ) -> Tensor:
        c, n = self.cfg.in_channels, self.cfg.image_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (c, n, n):
            raise InvalidArgument(f"expected input [B, {c}, {n}, {n}], got {tuple(x.shape)}")
        B = x.shape[0]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        if t.numel() != B:
            raise InvalidArgument(f"{t.numel()} timesteps for a batch of {B}")
        context = self.encode_tokens(tokens)
        if context.shape[0] == 1 and B > 1:
            context = context.expand(B, -1, -1)
        dtype = self.conv_in.weight.dtype
        context = context.to(dtype)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(dtype))
        ctx = _Context(override, taps)

        h0 = self.conv_in(x.to(dtype))
        h = self.down1(h0)
        for blk in self.enc1:
            h = blk(h, temb, context, ctx)
        s1 = h
        h = self.down2(h)
        for blk in self.enc2:
            h = blk(h, temb, context, ctx)
        s2 = h
        h = self.mid(h, temb)
        h = torch.cat([h, s2], dim=1)
        for blk in self.dec2:
            h = blk(h, temb, context, ctx)
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = torch.cat([h, s1], dim=1)
        for blk in self.dec1:
            h = blk(h, temb, context, ctx)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.out_res(torch.cat([h, h0], dim=1), temb)
        return self.conv_out(F.silu(self.out_norm(h)))

    def flat_weights(self) -> Tensor:
        return torch.cat([p.detach().reshape(-1).to(torch.float32) for p in self.state_dict().values()])

    def load_flat_weights(self, flat: Tensor) -> None:
        state = self.state_dict()
        total = sum(p.numel() for p in state.values())
        if flat.numel() != total:
            raise InvalidArgument(f"weight vector has {flat.numel()} values, model needs {total}")
        offset = 0
        new = {}
        for name, p in state.items():
            new[name] = flat[offset : offset + p.numel()].reshape(p.shape).to(p.dtype)
            offset += p.numel()
        self.load_state_dict(new)

    def config_dict(self) -> dict:
        return asdict(self.cfg)


def denoise_with_taps(
    model: ToyDenoiser, z: Tensor, t, tokens, override: Optional[Override] = None
) -> tuple[Tensor, dict[int, AttentionTriplet], dict[int, Tensor]]:
    """Forward pass that also returns every self-attention triplet and cross-attention map."""
    taps = Taps()
    with torch.no_grad():
        eps = model(z, t, tokens, override=override, taps=taps)
    return eps, taps.self_attn, taps.cross_attn
