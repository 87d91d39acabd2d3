import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scanshare import data as D
from scanshare.data import Fixation, ImageSample, Scanpath, TaskSpec
from scanshare.errors import ConfigurationError, InputError, LoadError, ValidationError


def closed_form_area(kind, r):
    if kind == "square":
        return (2 * r + 1) ** 2
    if kind == "diamond":
        return 2 * r * r + 2 * r + 1
    # disk: lattice points with dx^2 + dy^2 <= r^2, counted column by column
    return sum(2 * int(np.floor(np.sqrt(r * r - dx * dx))) + 1 for dx in range(-r, r + 1))


def inside(seg, fix, label):
    col, row = fix.pixel(seg.shape[1], seg.shape[0])
    return seg[row, col] == label


# -- types ------------------------------------------------------------------


def test_task_spec_rules():
    assert TaskSpec.free_viewing().condition == "fv"
    assert TaskSpec.search(3).condition == "vs:3"
    with pytest.raises(InputError):
        TaskSpec("fv", 2)
    with pytest.raises(InputError):
        TaskSpec("vs")
    with pytest.raises(InputError):
        TaskSpec.search(19)


def test_fixation_must_be_in_unit_square():
    with pytest.raises(ValidationError):
        Fixation(1.2, 0.5)
    assert Fixation(1.0, 1.0).pixel(8, 4) == (7, 3)


# -- scenes -----------------------------------------------------------------


def test_scene_is_deterministic():
    a, b = D.generate_scene(5), D.generate_scene(5)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.segmentation.tobytes() == b.segmentation.tobytes()
    assert a.pixels.shape == (3, 96, 128)


def test_single_category_scene_labels():
    s = D.generate_scene(3, categories=1)
    (c,) = s.present_targets
    assert set(np.unique(s.segmentation)) == {0, c}


@pytest.mark.parametrize("kind", ["square", "disk", "diamond"])
@pytest.mark.parametrize("r", [2, 5, 9])
def test_mask_area_matches_closed_form(kind, r):
    mask = D.shape_mask(kind, r, 40, 40, 20, 20)
    assert mask.sum() == closed_form_area(kind, r)


def test_generated_masks_are_exact_shapes():
    s = D.generate_scene(11, categories=6)
    for shape in D.scene_shapes(s):
        c = shape["category"]
        ys, xs = np.nonzero(s.segmentation == c)
        r = (xs.max() - xs.min()) // 2
        assert shape["area"] == closed_form_area(D.category_kind(c), r)


def test_grid_too_small_is_rejected():
    with pytest.raises(ConfigurationError):
        D.generate_scene(0, grid=(1, 2), categories=3)
    with pytest.raises(ConfigurationError):
        D.generate_scene(0, size=(100, 96))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_scene_invariants(seed, cats):
    s = D.generate_scene(seed, grid=(2, 3), categories=cats, size=(96, 64))
    labels = set(np.unique(s.segmentation).tolist())
    assert labels <= {0} | set(s.present_targets)
    assert len(s.present_targets) == cats
    assert s.height % 32 == 0 and s.width % 32 == 0
    assert s.pixels.min() >= 0 and s.pixels.max() <= 1


# -- oracles ----------------------------------------------------------------


def test_fv_oracle_single_shape_lands_inside():
    s = D.generate_scene(2, categories=1)
    sp = D.oracle_scanpath_fv(s, 0)
    (c,) = s.present_targets
    assert sp.fixations[0] == Fixation(0.5, 0.5)
    assert inside(s.segmentation, sp.fixations[1], c)
    assert sp.terminated


def test_fv_oracle_prefers_larger_of_equal_colour_shapes():
    h, w = 64, 64
    color = D.category_color(1) / 255.0
    pixels = np.empty((3, h, w), np.float32)
    pixels[:] = (D.BACKGROUND / 255.0)[:, None, None]
    seg = np.zeros((h, w), np.int32)
    seg[5:10, 5:10] = 7  # 25 px, painted the same colour as the larger one
    seg[40:50, 40:50] = 2  # 100 px
    for c in (2, 7):
        pixels[:, seg == c] = color[:, None]
    scene = ImageSample("two", pixels, seg)
    shapes = {s["category"]: s for s in D.scene_shapes(scene)}
    # salience = colour distance x area, colour distance equal for both
    assert D.shape_salience(shapes[2]) == pytest.approx(4 * D.shape_salience(shapes[7]))
    sp = D.oracle_scanpath_fv(scene)
    assert inside(seg, sp.fixations[1], 2) and inside(seg, sp.fixations[2], 7)


def test_oracles_are_deterministic():
    s = D.generate_scene(21)
    assert D.oracle_scanpath_fv(s, 4, 6) == D.oracle_scanpath_fv(s, 4, 6)
    t = min(s.present_targets)
    assert D.oracle_scanpath_vs(s, t, 4) == D.oracle_scanpath_vs(s, t, 4)


def test_vs_oracle_without_same_hue_distractor_has_length_two():
    for seed in range(50):
        s = D.generate_scene(seed)
        for t in s.present_targets:
            if not any(c != t and D.category_hue(c) == D.category_hue(t) for c in s.present_targets):
                sp = D.oracle_scanpath_vs(s, t, seed)
                assert len(sp) == 2 and inside(s.segmentation, sp.fixations[-1], t)
                return
    pytest.fail("no scene without distractors found")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5000), st.integers(0, 100))
def test_vs_oracle_ends_inside_target(scene_seed, seed):
    s = D.generate_scene(scene_seed, categories=6)
    for t in s.present_targets:
        sp = D.oracle_scanpath_vs(s, t, seed)
        assert sp.fixations[0] == Fixation(0.5, 0.5)
        assert 2 <= len(sp) <= 4
        assert inside(s.segmentation, sp.fixations[-1], t)
        for f in sp.fixations[1:-1]:
            label = s.segmentation[f.pixel(s.width, s.height)[::-1]]
            assert D.category_hue(int(label)) == D.category_hue(t)


def test_vs_oracle_absent_target():
    s = D.generate_scene(1)
    absent = next(c for c in range(1, 19) if c not in s.present_targets)
    with pytest.raises(InputError):
        D.oracle_scanpath_vs(s, absent)


# -- files ------------------------------------------------------------------


def test_round_trip(tmp_path):
    pairs = D.synthesize(3, 4)
    D.save_dataset(pairs, tmp_path / "fix.jsonl", tmp_path / "img")
    back = D.load_dataset(tmp_path / "fix.jsonl", tmp_path / "img")
    assert len(back) == len(pairs)
    for (s0, p0), (s1, p1) in zip(pairs, back):
        assert p0 == p1
        assert s0.id == s1.id
        assert np.array_equal(s0.pixels, s1.pixels)
        assert np.array_equal(s0.segmentation, s1.segmentation)
        assert s0.present_targets == s1.present_targets


def test_single_record_file(tmp_path):
    s = D.generate_scene(0)
    D.save_image(s, tmp_path)
    rec = {"image_id": s.id, "task": "fv", "fixations": [[0.5, 0.5], [0.1, 0.2], [0.9, 0.9]], "terminated": True}
    (tmp_path / "f.jsonl").write_text(json.dumps(rec) + "\n")
    (pair,) = D.load_dataset(tmp_path / "f.jsonl", tmp_path)
    assert len(pair[1]) == 3


def test_out_of_range_coordinate_names_record(tmp_path):
    good = {"image_id": "a", "task": "fv", "fixations": [[0.5, 0.5]], "terminated": True}
    bad = {"image_id": "a", "task": "vs", "target": 2, "fixations": [[1.2, 0.5]], "terminated": True}
    (tmp_path / "f.jsonl").write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(ValidationError, match="record 1"):
        D.read_scanpaths(tmp_path / "f.jsonl")


def test_missing_image_names_id(tmp_path):
    rec = {"image_id": "ghost", "task": "fv", "fixations": [[0.5, 0.5]], "terminated": True}
    (tmp_path / "f.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(LoadError, match="ghost"):
        D.load_dataset(tmp_path / "f.jsonl", tmp_path)


# -- splits -----------------------------------------------------------------


def _pairs(n):
    return [(ImageSample(f"im{i}", np.zeros((3, 32, 32), np.float32)),
             Scanpath(f"im{i}", TaskSpec.free_viewing(), [Fixation(0.5, 0.5)])) for i in range(n)]


def test_split_counts_and_determinism():
    pairs = _pairs(10)
    a = D.split_dataset(pairs, (0.8, 0.1, 0.1), seed=3)
    assert (len(a.train), len(a.val), len(a.test)) == (8, 1, 1)
    b = D.split_dataset(pairs, (0.8, 0.1, 0.1), seed=3)
    assert [p[0].id for p in a.test] == [p[0].id for p in b.test]


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.integers(0, 1000))
def test_split_ids_disjoint(n, seed):
    pairs = _pairs(n)
    s = D.split_dataset(pairs, (0.6, 0.2, 0.2), seed)
    ids = [{p[0].id for p in part} for part in (s.train, s.val, s.test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(map(len, ids)) == n
    assert all(ids)


def test_split_needs_three_images():
    with pytest.raises(ConfigurationError):
        D.split_dataset(_pairs(2))
    with pytest.raises(ConfigurationError):
        D.split_dataset(_pairs(5), (0.5, 0.5, 0.1))


def test_synthesize_counts():
    pairs = D.synthesize(0, 10)
    fv = [sp for _, sp in pairs if sp.task.kind == "fv"]
    vs = [sp for _, sp in pairs if sp.task.kind == "vs"]
    assert len(fv) == 10 and len(vs) >= 10
