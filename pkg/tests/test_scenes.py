import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcactrl import vocab
from mcactrl.errors import InvalidArgument
from mcactrl.scenes import (
    COMPLEX_VARIANTS,
    PALETTE,
    Background,
    BenchmarkConfig,
    ObjectSpec,
    SceneSpec,
    make_benchmark,
    make_training_dataset,
    _addition_condition,
    palette_distance,
    region_mask,
    random_scene,
    read_benchmark,
    render_scene,
    segment_synthetic,
    shape_mask,
    write_benchmark,
)


def disk_count(radius, size):
    """Pixels whose centre lies strictly inside the disk, counted on doubled integer coordinates."""
    c = size  # doubled centre of a disk placed at size/2
    r2 = (2 * radius) ** 2
    return sum(1 for y in range(size) for x in range(size) if (2 * x + 1 - c) ** 2 + (2 * y + 1 - c) ** 2 < r2)


def test_palette_has_eight_colors():
    assert list(PALETTE) == list(vocab.COLOR_NAMES) and len(PALETTE) == 8


def test_empty_scene_is_constant():
    img, masks = render_scene(SceneSpec(Background("solid", ("cyan",))))
    assert masks == [] and (img == np.array(PALETTE["cyan"], np.uint8)).all()


def test_centered_circle_pixel_count():
    _, (m,) = render_scene(SceneSpec(objects=(ObjectSpec("circle", "red", (16, 16), 8),)))
    assert m.sum() == disk_count(8, 32) == 208


def test_render_determinism_and_bounds():
    spec = random_scene(np.random.default_rng(5))
    a, _ = render_scene(spec)
    b, _ = render_scene(spec)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(InvalidArgument):
        render_scene(SceneSpec(objects=(ObjectSpec("square", "red", (3, 16), 5),)))
    with pytest.raises(InvalidArgument):
        SceneSpec(objects=(ObjectSpec("square", "red", (16, 16), 2),) * 4)
    with pytest.raises(InvalidArgument):
        ObjectSpec("hexagon", "red", (16, 16), 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_scenes_partition_and_segment(seed):
    spec = random_scene(np.random.default_rng(seed))
    img, masks = render_scene(spec)
    total = np.zeros(img.shape[:2], int)
    for m in masks:
        total += m
    assert total.max() <= 1
    for obj, m in zip(spec.objects, masks):
        # at least half the silhouette survives; visible pixels carry the object colour or its shade
        full = shape_mask(obj.shape, obj.center, obj.scale, 32)
        assert m.sum() >= 0.5 * full.sum()
        assert set(map(tuple, img[m])) <= {tuple(PALETTE[obj.color]), tuple(round(0.6 * c) for c in PALETTE[obj.color])}


def test_training_dataset():
    one = make_training_dataset(1, seed=3)
    again = make_training_dataset(1, seed=3)
    assert one[0][1] == again[0][1] and one[0][0].tobytes() == again[0][0].tobytes()
    data = make_training_dataset(512, seed=0)
    assert len(data) == 512
    assert len({img.tobytes() + cap.encode() for img, cap in data}) == 512
    for _, cap in data:
        assert vocab.decode(vocab.encode(cap)) == cap


def test_benchmark_counts_and_variants():
    cases = make_benchmark(BenchmarkConfig(subjects=2, conditions_per_subject=10, prompts_per_subject=5))
    by_task = {t: [c for c in cases if c.task == t] for t in ("swapping", "addition", "generation")}
    assert [len(by_task[t]) for t in ("swapping", "addition", "generation")] == [20, 20, 10]
    for c in by_task["swapping"]:
        assert c.condition_mask.any()
        assert np.array_equal(segment_synthetic(c.condition_image, c.condition_query[1], c.condition_query[0]),
                              c.condition_mask)
        assert np.array_equal(segment_synthetic(c.subject_image, c.subject_query[1], c.subject_query[0]),
                              c.subject_mask)
    for c in by_task["addition"]:
        assert c.region is not None and np.array_equal(c.condition_mask, region_mask(c.region, 32, 32))
    variants = [c.variant for c in by_task["swapping"]]
    assert variants.count("clean") == 12
    for v in COMPLEX_VARIANTS:
        assert variants.count(v) == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_addition_region_holds_no_object(seed):
    subj = ObjectSpec("circle", "red", (16, 16), 7)
    spec, region = _addition_condition(np.random.default_rng(seed), 32, subj)
    _, masks = render_scene(spec)
    rm = region_mask(region, 32, 32)
    assert rm.any() and not any((m & rm).any() for m in masks)


def test_occlusion_and_similar_variants():
    cases = make_benchmark(BenchmarkConfig(subjects=3, seed=1))
    occ = [c for c in cases if c.variant == "occlusion"]
    assert occ
    for c in occ:
        # front object wins at the overlap; the oracle recovers exactly the visible part
        other = segment_synthetic(c.condition_image, *reversed(c.condition_query))
        assert np.array_equal(other, c.condition_mask)
    for c in (c for c in cases if c.variant == "similar"):
        bg_word = c.condition_caption.split(" on ")[-1].split()[0]
        if bg_word in PALETTE:
            assert palette_distance(bg_word, c.condition_query[0]) <= 1


def test_benchmark_manifest_round_trip(tmp_path):
    cases = make_benchmark(BenchmarkConfig(subjects=1, conditions_per_subject=5, prompts_per_subject=2))
    path = write_benchmark(cases, tmp_path)
    back = read_benchmark(path)
    assert len(back) == len(cases) == 12
    for a, b in zip(cases, back):
        assert a.case_id == b.case_id and a.task == b.task and a.region == b.region
        assert np.array_equal(a.subject_image, b.subject_image)
        assert (a.condition_mask is None) == (b.condition_mask is None)
        if a.condition_mask is not None:
            assert np.array_equal(a.condition_mask, b.condition_mask)
    assert len(path.read_text().strip().splitlines()) == 13
