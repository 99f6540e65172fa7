import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from mcactrl.errors import FormatError, InvalidArgument, NotFound
from mcactrl.masks import (
    MaskPyramid,
    build_pyramid,
    dilate,
    downsample_max,
    extract_cross_attention_mask,
    load_mask,
    load_region,
    save_mask,
    upsample_nearest,
)
from mcactrl.scenes import Background, ObjectSpec, SceneSpec, render_scene, segment_synthetic

masks_strategy = hnp.arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def brute_dilate(m):
    H, W = m.shape
    out = np.zeros_like(m)
    for y in range(H):
        for x in range(W):
            out[y, x] = any(
                m[yy, xx]
                for yy in range(max(0, y - 1), min(H, y + 2))
                for xx in range(max(0, x - 1), min(W, x + 2))
            )
    return out


# --- dilation ---------------------------------------------------------------------------


def test_dilate_examples():
    assert not dilate(np.zeros((8, 8), bool)).any()
    m = np.zeros((10, 10), bool)
    m[5, 5] = True
    expected = np.zeros_like(m)
    expected[4:7, 4:7] = True
    assert np.array_equal(dilate(m), expected)
    c = np.zeros((10, 10), bool)
    c[0, 0] = True
    d = dilate(c)
    assert d.sum() == 4 and d[:2, :2].all()


def test_dilate_zero_iterations_and_errors():
    m = np.eye(4, dtype=bool)
    assert np.array_equal(dilate(m, 0), m)
    with pytest.raises(InvalidArgument):
        dilate(m, -1)
    with pytest.raises(InvalidArgument):
        dilate(np.full((2, 2), 2))


@settings(max_examples=200, deadline=None)
@given(masks_strategy)
def test_dilate_matches_brute_force(m):
    assert np.array_equal(dilate(m), brute_dilate(m))


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_dilate_superset_and_union(data):
    shape = data.draw(st.tuples(st.integers(1, 12), st.integers(1, 12)))
    a = data.draw(hnp.arrays(bool, shape))
    b = data.draw(hnp.arrays(bool, shape))
    k = data.draw(st.integers(0, 3))
    assert (dilate(a, k) >= a).all()
    assert np.array_equal(dilate(a | b, k), dilate(a, k) | dilate(b, k))


@settings(max_examples=100, deadline=None)
@given(masks_strategy, st.integers(1, 4))
def test_dilate_growth_bound(m, k):
    d = dilate(m, k)
    ys, xs = np.nonzero(m)
    for y, x in zip(*np.nonzero(d)):
        assert len(ys) and np.min(np.maximum(np.abs(ys - y), np.abs(xs - x))) <= k


# --- pyramid ------------------------------------------------------------------------------


def test_pyramid_examples():
    res = [(16, 16), (8, 8)]
    ones = build_pyramid(np.ones((32, 32), bool), res)
    assert all(ones[r].all() for r in res)
    empty = build_pyramid(np.zeros((32, 32), bool), res)
    assert not any(empty[r].any() for r in res)
    m = np.zeros((32, 32), bool)
    m[13, 21] = True
    p = build_pyramid(m, res)
    assert p[(8, 8)].sum() == 1 and p[(8, 8)][3, 5]
    assert (16, 16) in p and (4, 4) not in p
    assert p.flat((8, 8)).shape == (64,)
    with pytest.raises(InvalidArgument):
        build_pyramid(m, [(64, 64)])
    with pytest.raises(KeyError):
        p[(4, 4)]
    c = MaskPyramid.constant(True, (32, 32), res)
    assert c[(8, 8)].all()


@settings(max_examples=200, deadline=None)
@given(m=hnp.arrays(bool, (12, 12)), h=st.integers(1, 12), w=st.integers(1, 12))
def test_max_pool_soundness(m, h, w):
    d = downsample_max(m, h, w)
    # every set base pixel lies in a set cell; every set cell covers a set pixel
    for y, x in zip(*np.nonzero(m)):
        assert d[(y * h) // 12, (x * w) // 12]
    for i, j in zip(*np.nonzero(d)):
        r0, r1 = (i * 12) // h, -((-(i + 1) * 12) // h)
        c0, c1 = (j * 12) // w, -((-(j + 1) * 12) // w)
        assert m[r0:r1, c0:c1].any()


def test_upsample_nearest_round_trip():
    m = np.random.default_rng(0).random((8, 8)) > 0.5
    up = upsample_nearest(m, 32, 32)
    assert np.array_equal(downsample_max(up, 8, 8), m)


# --- cross-attention masks ------------------------------------------------------------------


def maps_from(spatial, token=2, n_tokens=5, heads=2):
    side = spatial.shape[0]
    t = torch.zeros(heads, side * side, n_tokens, dtype=torch.float64)
    t[:, :, token] = torch.from_numpy(spatial.reshape(-1))
    return {5: t}


def test_cross_attention_examples():
    delta = np.zeros((4, 4))
    delta[1, 2] = 1.0
    m = extract_cross_attention_mask(maps_from(delta), 2)
    assert m.sum() == 1 and m[1, 2]
    assert not extract_cross_attention_mask(maps_from(np.full((4, 4), 0.3)), 2).any()
    two = np.full((4, 4), 0.05)
    two[0, 0], two[3, 3] = 0.9, 0.8
    two[2, 1] = 0.1
    m = extract_cross_attention_mask(maps_from(two), 2)
    assert m.sum() == 2 and m[0, 0] and m[3, 3]
    with pytest.raises(InvalidArgument):
        extract_cross_attention_mask(maps_from(two), 7)
    with pytest.raises(InvalidArgument):
        extract_cross_attention_mask(maps_from(two), 3, prompt_length=3)


@settings(max_examples=100, deadline=None)
@given(
    arr=hnp.arrays(np.int64, (4, 4), elements=st.integers(0, 1000)).map(lambda x: x / 1000.0),
    a=st.floats(0.1, 10),
    b=st.floats(-5, 5),
)
def test_cross_attention_affine_invariance(arr, a, b):
    base = extract_cross_attention_mask(maps_from(arr), 2)
    scaled = extract_cross_attention_mask(maps_from(arr * a + b), 2)
    lo, hi = arr.min(), arr.max()
    norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    # skip values sitting on the threshold where rounding may flip them
    stable = np.abs(norm - 0.5) > 1e-6
    assert np.array_equal(base[stable], scaled[stable])


def test_cross_attention_resolution_selection():
    maps = {0: torch.zeros(2, 256, 4), 4: torch.rand(2, 64, 4), 6: torch.rand(2, 256, 4)}
    maps[6][:, 17, 1] = 5.0
    m = extract_cross_attention_mask(maps, 1, layers=[4, 6])
    assert m.shape == (16, 16) and m.reshape(-1)[17]
    assert extract_cross_attention_mask(maps, 1, layers=[4, 6], resolution=(8, 8)).shape == (8, 8)


# --- I/O ----------------------------------------------------------------------------------


def test_mask_io(tmp_path):
    m = np.random.default_rng(1).random((7, 9)) > 0.5
    save_mask(m, tmp_path / "m.png")
    assert np.array_equal(load_mask(tmp_path / "m.png"), m)
    Image.fromarray(np.full((2, 2), 128, np.uint8), mode="L").save(tmp_path / "bad.png")
    with pytest.raises(FormatError, match="128"):
        load_mask(tmp_path / "bad.png")
    Image.fromarray(np.full((1, 1), 255, np.uint8), mode="L").save(tmp_path / "one.png")
    assert load_mask(tmp_path / "one.png").tolist() == [[True]]


def test_region_file(tmp_path):
    (tmp_path / "r.txt").write_text("1 2 3 4\n")
    m = load_region(tmp_path / "r.txt", 8, 8)
    assert m.sum() == 9 and m[2:5, 1:4].all()
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(FormatError):
        load_region(tmp_path / "bad.txt", 8, 8)
    (tmp_path / "out.txt").write_text("0 0 8 8\n")
    with pytest.raises(InvalidArgument):
        load_region(tmp_path / "out.txt", 8, 8)


# --- segmentation oracle --------------------------------------------------------------------


def test_segment_examples():
    one = SceneSpec(objects=(ObjectSpec("circle", "red", (16, 16), 8),))
    img, (gt,) = render_scene(one)
    assert np.array_equal(segment_synthetic(img, "circle", "red"), gt)
    two = SceneSpec(objects=(ObjectSpec("circle", "red", (9, 9), 6), ObjectSpec("square", "blue", (23, 22), 6)))
    img, gts = render_scene(two)
    assert np.array_equal(segment_synthetic(img, "square", "blue"), gts[1])
    with pytest.raises(NotFound):
        segment_synthetic(img, "triangle", "green")


def test_segment_textured_on_checker():
    spec = SceneSpec(Background("checker", ("white", "yellow")),
                     (ObjectSpec("triangle", "blue", (16, 16), 9, "striped"),))
    img, (gt,) = render_scene(spec)
    assert np.array_equal(segment_synthetic(img, "triangle", "blue"), gt)
