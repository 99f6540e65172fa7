"""Masked self-attention and the two fusion operations (local query and global injection).

Tensors are ``[heads, tokens, d]``; masks are flat ``[tokens]`` 0/1 vectors at the
layer's resolution. ``M_C == 1`` marks the editable region of the condition image,
``M_S == 1`` marks the subject in the subject image.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor

from .denoiser import AttentionTriplet
from .errors import InvalidArgument

MASK_FILL = -1e9


def attention_logits(q: Tensor, k: Tensor) -> Tensor:
    if q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise InvalidArgument(f"cannot attend {tuple(q.shape)} queries to {tuple(k.shape)} keys")
    return q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor, fill_value: int) -> Tensor:
    """softmax(QK^T/sqrt(d) + fill) V with ``fill = -1e9`` at keys where ``mask == fill_value``.

    If every key is filled the row falls back to plain attention.
    """
    mask = torch.as_tensor(mask)
    if mask.shape != (k.shape[-2],):
        raise InvalidArgument(f"mask has shape {tuple(mask.shape)}, expected ({k.shape[-2]},)")
    if k.shape[-2] != v.shape[-2]:
        raise InvalidArgument("k and v token counts differ")
    logits = attention_logits(q, k)
    blocked = mask.to(logits.device) == fill_value
    if blocked.all() or not blocked.any():
        return torch.softmax(logits, dim=-1) @ v
    logits = logits + torch.where(blocked, MASK_FILL, 0.0).to(logits.dtype)
    return torch.softmax(logits, dim=-1) @ v


def _fuse(m_c: Tensor, inside: Tensor, outside: Tensor) -> Tensor:
    sel = (torch.as_tensor(m_c) != 0).to(inside.device)[:, None]
    return torch.where(sel, inside, outside)


def _check(*trips: AttentionTriplet, m_s: Tensor, m_c: Tensor):
    n = trips[0].tokens
    res = trips[0].resolution
    for t in trips:
        if t.tokens != n or t.k.shape[-2] != n or tuple(t.resolution) != tuple(res):
            raise InvalidArgument("all branches must be at the same layer resolution")
    if torch.as_tensor(m_s).shape != (n,) or torch.as_tensor(m_c).shape != (n,):
        raise InvalidArgument(f"masks must be flat vectors of {n} tokens (resolution {res})")


def salq_fuse(
    target: AttentionTriplet,
    subject: AttentionTriplet,
    condition: AttentionTriplet,
    m_s: Tensor,
    m_c: Tensor,
    printed_order: bool = False,
) -> Tensor:
    """Target queries read the subject inside M_S and the condition outside M_C, fused by M_C.

    ``printed_order`` swaps which term lands inside the editable region.
    """
    _check(target, subject, condition, m_s=m_s, m_c=m_c)
    fg = masked_attention(target.q, subject.k, subject.v, m_s, fill_value=0)
    bg = masked_attention(target.q, condition.k, condition.v, m_c, fill_value=1)
    return _fuse(m_c, bg, fg) if printed_order else _fuse(m_c, fg, bg)


def sagi_fuse(
    subject: AttentionTriplet,
    condition: AttentionTriplet,
    m_s: Tensor,
    m_c: Tensor,
    printed_order: bool = False,
) -> Tensor:
    """Masked self-attention of the two source branches, composited by M_C; replaces the target output."""
    _check(subject, condition, m_s=m_s, m_c=m_c)
    fs = masked_attention(subject.q, subject.k, subject.v, m_s, fill_value=0)
    fc = masked_attention(condition.q, condition.k, condition.v, m_c, fill_value=1)
    return _fuse(m_c, fc, fs) if printed_order else _fuse(m_c, fs, fc)
