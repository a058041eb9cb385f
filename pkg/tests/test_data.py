import numpy as np
import pytest

from gated_dit.data import (
    HUE_FAMILIES, STREAM_EVAL, STREAM_SAMPLE, SUBJECT_BACKGROUND, ShapeKind, ShapeSpec, TaskKind,
    batch_rng, blur_condition, box_blur, class_identity, condition_operator, edge_map, gen_scene,
    gray_condition, luminance, make_batch, measure_throughput, read_ppm, render, shape_mask,
    subject_condition, write_ppm,
)
from gated_dit.errors import ClassIdError, GatedDiTError


def square_image(size=16, lo=4, hi=12, value=1.0):
    img = np.zeros((3, size, size))
    img[:, lo:hi, lo:hi] = value
    return img


class TestStreams:
    def test_trailing_zero_key_is_a_new_stream(self):
        a = batch_rng(7, 3).standard_normal(5)
        b = batch_rng(7, 3, 0).standard_normal(5)
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize("stream", [STREAM_EVAL, STREAM_SAMPLE])
    def test_batch_and_first_noise_streams_differ(self, stream):
        # the batch of a stream and the noise of its first image must not share draws
        batch = batch_rng(0, stream).standard_normal(64)
        noise = batch_rng(0, stream, 0).standard_normal(64)
        assert not np.array_equal(batch, noise)
        assert abs(np.corrcoef(batch, noise)[0, 1]) < 0.5

    def test_same_keys_same_stream(self):
        np.testing.assert_array_equal(batch_rng(4, 1, 2).random(3), batch_rng(4, 1, 2).random(3))


class TestScenes:
    def test_class_identity(self):
        assert class_identity(0) == (ShapeKind.DISC, HUE_FAMILIES[0])
        assert class_identity(4) == (ShapeKind.RECTANGLE, HUE_FAMILIES[1])
        assert class_identity(5)[0] is ShapeKind.TRIANGLE

    @pytest.mark.parametrize("class_id", range(6))
    def test_scene_matches_class(self, class_id):
        scene = gen_scene(class_id, batch_rng(11, class_id))
        kind, (h_lo, h_hi) = class_identity(class_id)
        assert scene.canvas.shape == (3, 32, 32)
        assert 0.0 <= scene.canvas.min() and scene.canvas.max() <= 1.0
        assert 1 <= len(scene.shapes) <= 3
        assert 0.15 <= scene.background <= 0.4
        for shape in scene.shapes:
            assert shape.kind is kind
            assert h_lo <= shape.hue <= h_hi
            assert shape.cx - shape.half_w >= 0 and shape.cx + shape.half_w <= 31
            assert shape.cy - shape.half_h >= 0 and shape.cy + shape.half_h <= 31

    def test_same_stream_same_scene(self):
        a = gen_scene(2, batch_rng(5, 0, 3))
        b = gen_scene(2, batch_rng(5, 0, 3))
        c = gen_scene(2, batch_rng(5, 0, 4))
        np.testing.assert_array_equal(a.canvas, b.canvas)
        assert not np.array_equal(a.canvas, c.canvas)

    def test_class_out_of_range(self, rng):
        with pytest.raises(ClassIdError):
            gen_scene(6, rng)
        with pytest.raises(ClassIdError):
            gen_scene(-1, rng)

    def test_masks(self):
        disc = ShapeSpec(ShapeKind.DISC, 8.0, 8.0, 3.0, 3.0, 0.0, (1.0, 0.0, 0.0))
        mask = shape_mask(disc, 16)
        assert mask[8, 8] and mask[8, 11] and not mask[8, 12] and not mask[0, 0]
        tri = ShapeSpec(ShapeKind.TRIANGLE, 8.0, 8.0, 4.0, 4.0, 0.0, (1.0, 0.0, 0.0))
        tmask = shape_mask(tri, 16)
        # narrow at the apex, wide at the base
        assert tmask[4].sum() < tmask[12].sum()

    def test_render_paints_rgb(self):
        rect = ShapeSpec(ShapeKind.RECTANGLE, 5.0, 5.0, 2.0, 1.0, 0.1, (0.9, 0.2, 0.1))
        canvas = render([rect], 10, 0.3)
        np.testing.assert_allclose(canvas[:, 5, 5], [0.9, 0.2, 0.1])
        np.testing.assert_allclose(canvas[:, 0, 0], [0.3, 0.3, 0.3])


class TestConditions:
    def test_edges_on_square_boundary(self):
        edges = edge_map(square_image())
        assert edges[4, 8] and edges[8, 11]
        assert not edges[8, 8] and not edges[0, 0]

    def test_flat_image_has_no_edges(self):
        assert not edge_map(np.full((3, 8, 8), 0.4)).any()

    def test_box_blur(self):
        flat = np.full((3, 9, 9), 0.7)
        np.testing.assert_allclose(box_blur(flat), flat)
        spike = np.zeros((1, 9, 9))
        spike[0, 4, 4] = 25.0
        blurred = box_blur(spike, radius=2)
        np.testing.assert_allclose(blurred[0, 2:7, 2:7], 1.0)
        assert blurred[0, 0, 0] == 0.0

    @pytest.mark.parametrize("y,x", [(2, 2), (4, 7), (6, 3), (8, 8)])
    def test_box_blur_conserves_mass(self, y, x):
        spike = np.zeros((1, 11, 11))
        spike[0, y, x] = 3.0
        blurred = box_blur(spike, radius=2)
        assert abs(blurred.sum() - 3.0) < 1e-9
        support = np.argwhere(blurred[0] > 0)
        assert (support.min(axis=0) == [y - 2, x - 2]).all() and (support.max(axis=0) == [y + 2, x + 2]).all()

    def test_blur_condition_conserves_interior_mass(self, rng):
        img = np.zeros((3, 32, 32))
        img[:, 8:24, 8:24] = rng.uniform(size=(3, 16, 16))
        assert abs(blur_condition(img).sum() - img.sum()) < 1e-9

    def test_blur_condition_softens_edges(self):
        img = square_image()
        blurred = blur_condition(img)
        assert np.abs(np.diff(blurred[0], axis=1)).max() < np.abs(np.diff(img[0], axis=1)).max()

    def test_grayscale(self):
        white = np.ones((3, 4, 4))
        np.testing.assert_allclose(luminance(white), 1.0)
        g = gray_condition(np.random.default_rng(0).uniform(size=(3, 4, 4)))
        np.testing.assert_array_equal(g[0], g[1])
        np.testing.assert_array_equal(g[1], g[2])

    def test_subject_keeps_identity(self):
        scene = gen_scene(3, batch_rng(2))
        cond = subject_condition(scene, batch_rng(2, 1))
        subject = scene.shapes[0]
        colors = {tuple(np.round(cond[:, y, x], 9)) for y in range(32) for x in range(32)}
        assert tuple(np.round(subject.rgb, 9)) in colors
        assert tuple([SUBJECT_BACKGROUND] * 3) in colors
        assert len(colors) == 2

    def test_subject_usually_moves(self):
        moved = 0
        for seed in range(1000):
            scene = gen_scene(seed % 6, batch_rng(seed, 0))
            cond = subject_condition(scene, batch_rng(seed, 1))
            where = np.any(np.abs(cond - SUBJECT_BACKGROUND) > 1e-9, axis=0)
            moved += not np.array_equal(where, shape_mask(scene.shapes[0], 32))
        assert moved / 1000 >= 0.9

    def test_subject_has_no_aligned_operator(self):
        assert condition_operator(TaskKind.SUBJECT) is None
        assert not TaskKind.SUBJECT.spatially_aligned


class TestBatches:
    @pytest.mark.parametrize("task", [TaskKind.EDGE, TaskKind.DEBLUR, TaskKind.COLORIZE])
    def test_aligned_conditions_come_from_target(self, task, rng):
        for sample in make_batch(task, 3, rng):
            np.testing.assert_allclose(condition_operator(task)(sample.target), sample.condition)

    def test_subject_batch(self, rng):
        batch = make_batch("subject", 2, rng, image_size=16)
        assert all(s.condition.shape == (3, 16, 16) for s in batch)

    def test_unknown_task(self, rng):
        with pytest.raises(GatedDiTError):
            make_batch("inpaint", 2, rng)

    @pytest.mark.slow
    def test_scene_throughput(self):
        assert measure_throughput(3000) >= 10_000


class TestPixmap:
    def test_write_and_read(self, tmp_path):
        img = np.random.default_rng(0).uniform(size=(3, 5, 7))
        path = write_ppm(str(tmp_path / "x.ppm"), img)
        with open(path, "rb") as f:
            assert f.read(11) == b"P6\n7 5\n255\n"
        np.testing.assert_allclose(read_ppm(path), img, atol=0.5 / 255 + 1e-12)

    def test_values_clipped(self, tmp_path):
        img = np.full((3, 2, 2), 1.7)
        img[0] = -0.3
        back = read_ppm(write_ppm(str(tmp_path / "c.ppm"), img))
        np.testing.assert_array_equal(back[0], 0.0)
        np.testing.assert_array_equal(back[1:], 1.0)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
        with pytest.raises(GatedDiTError):
            read_ppm(str(path))
