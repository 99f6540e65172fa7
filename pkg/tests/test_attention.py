import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mcactrl.attention import masked_attention, sagi_fuse, salq_fuse
from mcactrl.denoiser import AttentionTriplet
from mcactrl.errors import InvalidArgument


def brute_force(q, k, v, mask, fill_value):
    """Row-by-row loop over python floats; independent of the tensor implementation."""
    q, k, v, mask = (np.asarray(a, dtype=np.float64) for a in (q, k, v, mask))
    H, N, d = q.shape
    M = k.shape[1]
    out = np.zeros((H, N, v.shape[2]))
    allowed = [j for j in range(M) if mask[j] != fill_value] or list(range(M))
    for h in range(H):
        for i in range(N):
            scores = [sum(q[h, i, c] * k[h, j, c] for c in range(d)) / math.sqrt(d) for j in allowed]
            top = max(scores)
            w = [math.exp(s - top) for s in scores]
            z = sum(w)
            for jj, j in enumerate(allowed):
                out[h, i] += w[jj] / z * v[h, j]
    return out


def test_one_key_one_query():
    q = torch.tensor([[[1.0]]])
    k = torch.tensor([[[2.0]]])
    v = torch.tensor([[[5.0]]])
    assert masked_attention(q, k, v, torch.tensor([1]), fill_value=0).item() == 5.0


def test_blocked_key_gets_no_weight():
    q = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
    k = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
    v = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
    out = masked_attention(q, k, v, torch.tensor([0, 1]), fill_value=0)
    assert torch.allclose(out, torch.tensor([[[0.0, 1.0]]], dtype=torch.float64), atol=1e-12)


def test_fully_masked_row_falls_back_to_plain_attention():
    g = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(2, 4, 3, generator=g, dtype=torch.float64) for _ in range(3))
    plain = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(3), -1) @ v
    got = masked_attention(q, k, v, torch.zeros(4), fill_value=0)
    assert torch.isfinite(got).all()
    assert torch.allclose(got, plain, atol=1e-12)


def test_mask_shape_mismatch():
    q = torch.zeros(1, 4, 2)
    with pytest.raises(InvalidArgument):
        masked_attention(q, q, q, torch.ones(5), fill_value=0)


@settings(max_examples=100, deadline=None)
@given(
    H=st.integers(1, 3),
    N=st.integers(1, 6),
    M=st.integers(1, 6),
    d=st.integers(1, 4),
    fill=st.sampled_from([0, 1]),
    seed=st.integers(0, 2**20),
)
def test_oracle_matches(H, N, M, d, fill, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(H, N, d))
    k = rng.normal(size=(H, M, d))
    v = rng.normal(size=(H, M, 2))
    mask = rng.integers(0, 2, size=M)
    got = masked_attention(torch.from_numpy(q), torch.from_numpy(k), torch.from_numpy(v),
                           torch.from_numpy(mask), fill)
    assert np.abs(got.numpy() - brute_force(q, k, v, mask, fill)).max() <= 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**20), N=st.integers(2, 6))
def test_masking_ignores_blocked_values(seed, N):
    rng = np.random.default_rng(seed)
    q, k, v = (torch.from_numpy(rng.normal(size=(1, N, 3))) for _ in range(3))
    mask = torch.from_numpy(rng.integers(0, 2, size=N))
    if mask.sum() == 0:
        mask[0] = 1
    v2 = v.clone()
    v2[:, mask == 0] += 100.0
    a = masked_attention(q, k, v, mask, fill_value=0)
    b = masked_attention(q, k, v2, mask, fill_value=0)
    assert torch.allclose(a, b, atol=1e-6)


# --- fusion --------------------------------------------------------------------------------


def trip(seed, n=4, d=2, branch=""):
    g = torch.Generator().manual_seed(seed)
    side = int(math.isqrt(n))
    return AttentionTriplet(*(torch.randn(1, n, d, generator=g, dtype=torch.float64) for _ in range(3)),
                            layer=0, resolution=(side, side), branch=branch)


def test_salq_and_sagi_composite_by_editable_mask():
    tgt, sub, con = trip(1, branch="target"), trip(2, branch="subject"), trip(3, branch="condition")
    m_s = torch.tensor([1, 1, 0, 0])
    m_c = torch.tensor([0, 1, 1, 0])
    fg = masked_attention(tgt.q, sub.k, sub.v, m_s, 0)
    bg = masked_attention(tgt.q, con.k, con.v, m_c, 1)
    out = salq_fuse(tgt, sub, con, m_s, m_c)
    assert torch.equal(out[:, [1, 2]], fg[:, [1, 2]])
    assert torch.equal(out[:, [0, 3]], bg[:, [0, 3]])
    swapped = salq_fuse(tgt, sub, con, m_s, m_c, printed_order=True)
    assert torch.equal(swapped[:, [1, 2]], bg[:, [1, 2]])

    fs = masked_attention(sub.q, sub.k, sub.v, m_s, 0)
    fc = masked_attention(con.q, con.k, con.v, m_c, 1)
    g = sagi_fuse(sub, con, m_s, m_c)
    assert torch.equal(g[:, [1, 2]], fs[:, [1, 2]])
    assert torch.equal(g[:, [0, 3]], fc[:, [0, 3]])


def test_sagi_with_empty_editable_mask_is_condition_self_attention():
    sub, con = trip(4), trip(5)
    plain = torch.softmax(con.q @ con.k.transpose(-1, -2) / math.sqrt(2), -1) @ con.v
    out = sagi_fuse(sub, con, torch.tensor([1, 0, 0, 1]), torch.zeros(4, dtype=torch.long))
    assert torch.allclose(out, plain, atol=1e-12)


def test_fusion_resolution_mismatch():
    with pytest.raises(InvalidArgument):
        salq_fuse(trip(1, n=4), trip(2, n=16), trip(3, n=4), torch.ones(4), torch.ones(4))
    with pytest.raises(InvalidArgument):
        sagi_fuse(trip(1), trip(2), torch.ones(16), torch.ones(4))
