
import numpy as np
import pytest

from scanshare.data import Fixation, Scanpath, TaskSpec, generate_scene
from scanshare.render import (GROUND_TRUTH_COLOR, PREDICTION_COLOR, marker_centers, render_scanpaths,
                              save_overlay)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(0, grid=(2, 2), categories=2, size=(64, 64))


def sp(*pts):
    return Scanpath("s", TaskSpec.free_viewing(), [Fixation(x, y) for x, y in pts])


def colour_count(canvas, color):
    arr = np.asarray(canvas)
    return int(np.all(arr == np.array(color, np.uint8), axis=-1).sum())


def test_marker_centres_are_fixation_pixels(scene):
    pred = sp((0.5, 0.5), (0.1, 0.8), (0.9, 0.2))
    _, markers = render_scanpaths(scene, pred, scale=4)
    # fixation (0.1, 0.8) lies in source pixel (6, 51): centre of its 4x4 block is (26, 206)
    assert [m.center for m in markers] == [(130, 130), (26, 206), (230, 50)]
    assert [m.center for m in markers] == marker_centers(pred, 64, 64, 4)
    assert [m.final for m in markers] == [False, False, True]
    assert [m.index for m in markers] == [1, 2, 3]


def test_circle_drawn_in_prediction_colour(scene):
    canvas, markers = render_scanpaths(scene, sp((0.5, 0.5), (0.2, 0.2)), scale=4, radius=12)
    x, y = markers[0].center
    # left edge of the circle interior, clear of the centred digit
    assert canvas.getpixel((x - 9, y)) == PREDICTION_COLOR


def test_prediction_only_overlay_has_no_ground_truth_colour(scene):
    canvas, markers = render_scanpaths(scene, sp((0.5, 0.5), (0.3, 0.3)))
    assert colour_count(canvas, GROUND_TRUTH_COLOR) == 0 and colour_count(canvas, PREDICTION_COLOR) > 0
    assert all(m.color == PREDICTION_COLOR for m in markers)


def test_ground_truth_drawn_first_in_second_colour(scene):
    canvas, markers = render_scanpaths(scene, sp((0.5, 0.5), (0.2, 0.2)), sp((0.5, 0.5), (0.8, 0.8)))
    assert [m.color for m in markers] == [GROUND_TRUTH_COLOR] * 2 + [PREDICTION_COLOR] * 2
    assert colour_count(canvas, GROUND_TRUTH_COLOR) > 0


def test_final_fixation_has_distinct_rim(scene):
    canvas, markers = render_scanpaths(scene, sp((0.5, 0.5), (0.2, 0.2)), scale=4, radius=12)
    x, y = markers[-1].center
    assert canvas.getpixel((x - 12, y)) == (0, 0, 0)
    x0, y0 = markers[0].center
    assert canvas.getpixel((x0 - 12, y0)) == PREDICTION_COLOR


def test_png_bytes_deterministic(scene, tmp_path):
    pred = sp((0.5, 0.5), (0.2, 0.7))
    for name in ("a.png", "b.png"):
        save_overlay(render_scanpaths(scene, pred)[0], tmp_path / name)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert (tmp_path / "a.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
