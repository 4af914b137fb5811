import numpy as np

from sounding_loc.data import Box, SceneAnnotation, read_png
from sounding_loc.metrics import upsample_map
from sounding_loc.viz import ALPHA, GREEN, RED, colorize, composite, draw_boxes, overlay, scene_overlays, write_scene


def _frame(seed=0, size=32):
    return np.random.default_rng(seed).random((size, size, 3))


def test_overlay_is_the_alpha_blend():
    frame = _frame()
    m = np.random.default_rng(1).random((4, 4)) + 0.01
    scale = 2.0
    out = overlay(frame, m, scale)
    up = upsample_map(m, (32, 32))
    expected = (1 - ALPHA) * frame + ALPHA * colorize(up / scale)
    assert ALPHA == 0.5
    assert np.allclose(out, expected, rtol=0, atol=1e-12)


def test_zero_map_leaves_frame():
    frame = _frame()
    out = overlay(frame, np.zeros((4, 4)), 1.0)
    assert np.array_equal(out, frame)
    ann = SceneAnnotation([Box(0, (2, 2, 10, 10), True)], (32, 32))
    panels = scene_overlays(frame, np.zeros((1, 4, 4)), ann)
    assert np.array_equal(panels[0], draw_boxes(frame, ann, 0))


def test_box_colours():
    frame = np.zeros((20, 20, 3))
    ann = SceneAnnotation([Box(0, (2, 2, 6, 6), True), Box(1, (10, 10, 6, 6), False)], (20, 20))
    img = draw_boxes(frame, ann)
    assert tuple(img[2, 4]) == GREEN and tuple(img[10, 12]) == RED
    assert tuple(img[5, 5]) == (0.0, 0.0, 0.0)  # interior untouched
    only0 = draw_boxes(frame, ann, 0)
    assert tuple(only0[10, 12]) == (0.0, 0.0, 0.0)
    assert draw_boxes(frame, None) is frame


def test_write_scene_counts(tmp_path):
    frame = _frame(size=112)
    maps = np.random.default_rng(2).random((4, 14, 14))
    ann = SceneAnnotation([Box(k, (28 * k, 10, 20, 20), k < 2) for k in range(4)], (112, 112))
    paths = write_scene(tmp_path, "scene", frame, maps, ann)
    names = sorted(p.name for p in paths)
    assert names == ["scene_class0.png", "scene_class1.png", "scene_class2.png", "scene_class3.png",
                     "scene_composite.png"]
    assert read_png(tmp_path / "scene_class0.png").shape == (112, 112, 3)
    assert read_png(tmp_path / "scene_composite.png").shape == (112, 5 * 112 + 4 * 4, 3)


def test_composite_layout():
    frame = _frame(size=8)
    out = composite(frame, [frame, frame], gap=2)
    assert out.shape == (8, 3 * 8 + 2 * 2, 3)
    assert np.array_equal(out[:, :8], frame)
