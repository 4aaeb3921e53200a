import math

import numpy as np
import pytest

from relight3d.cameras import CameraPose
from relight3d.metrics import (
    chamfer,
    cross_view_normal_consistency,
    hue_distance,
    hue_histogram,
    mean_hue,
    normal_smoothness,
    psnr,
)


class TestPsnr:
    def test_identical_images_capped(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(img, img) == 99.0

    def test_closed_form(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)  # MSE = 0.01
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.random((6, 5, 3))
        b = rng.random((6, 5, 3))
        se = 0.0
        for i in range(6):
            for j in range(5):
                for c in range(3):
                    se += (a[i, j, c] - b[i, j, c]) ** 2
        mse = se / (6 * 5 * 3)
        assert psnr(a, b) == pytest.approx(-10.0 * math.log10(mse), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((3, 2)))


class TestChamfer:
    def test_identical_sets_zero(self):
        pts = np.random.default_rng(2).random((50, 3))
        assert chamfer(pts, pts) == 0.0

    def test_single_point_translation(self):
        p = np.array([[0.2, 0.3, 0.4]])
        q = p + np.array([[1.0, 0.0, 0.0]])
        assert chamfer(p, q) == pytest.approx(1.0)

    def test_concentric_spheres(self):
        rng = np.random.default_rng(3)
        dirs = rng.normal(size=(4000, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        delta = 0.05
        a = dirs * 1.0
        b = dirs * (1.0 + delta)
        assert chamfer(a, b) == pytest.approx(delta, rel=0.05)

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            chamfer(np.zeros((0, 3)), np.zeros((5, 3)))


class TestCrossView:
    def _sphere_buffers(self, cams, res=48, radius=0.7):
        from relight3d.scenes import PrimitiveScene, render_gbuffer
        from tests.test_scenes import sphere

        scene = PrimitiveScene([sphere(radius=radius)])
        gbs = [render_gbuffer(scene, c, res, res) for c in cams]
        normals = np.stack([g.normal for g in gbs])
        depths = np.stack([g.depth for g in gbs])
        masks = np.stack([g.mask for g in gbs])
        return normals, depths, masks

    def test_identical_view_zero_error(self):
        cams = [CameraPose(0.0, 10.0, 2.0), CameraPose(0.0, 10.0, 2.0)]
        normals, depths, masks = self._sphere_buffers(cams)
        err = cross_view_normal_consistency(normals, depths, masks, cams)
        assert err == pytest.approx(0.0, abs=1e-5)

    def test_orthogonal_views_small_error(self):
        cams = [CameraPose(a, 15.0, 2.0) for a in (0.0, 90.0)]
        normals, depths, masks = self._sphere_buffers(cams)
        err = cross_view_normal_consistency(normals, depths, masks, cams)
        assert err is not None and err < 2.0

    def test_random_normals_near_90deg(self):
        cams = [CameraPose(a, 15.0, 2.0) for a in (0.0, 90.0)]
        normals, depths, masks = self._sphere_buffers(cams)
        rng = np.random.default_rng(7)
        rand = rng.normal(size=normals[1].shape)
        rand /= np.linalg.norm(rand, axis=-1, keepdims=True)
        normals = normals.copy()
        normals[1] = rand
        err = cross_view_normal_consistency(normals, depths, masks, cams)
        assert err == pytest.approx(90.0, abs=8.0)

    def test_no_overlap_returns_none(self):
        cams = [CameraPose(0.0, 10.0, 2.0), CameraPose(90.0, 10.0, 2.0)]
        normals = np.zeros((2, 8, 8, 3))
        depths = np.zeros((2, 8, 8))
        masks = np.zeros((2, 8, 8))
        assert cross_view_normal_consistency(normals, depths, masks, cams) is None


class TestHue:
    def test_pure_colors(self):
        red = np.zeros((4, 4, 3))
        red[..., 0] = 1.0
        mask = np.ones((4, 4))
        assert mean_hue(red, mask) == pytest.approx(0.0, abs=1e-9)
        green = np.zeros((4, 4, 3))
        green[..., 1] = 1.0
        assert mean_hue(green, mask) == pytest.approx(120.0, abs=1e-9)
        blue = np.zeros((4, 4, 3))
        blue[..., 2] = 1.0
        assert mean_hue(blue, mask) == pytest.approx(240.0, abs=1e-9)

    def test_histogram_concentrates(self):
        img = np.zeros((4, 4, 3))
        img[..., 0] = 0.8  # red: hue 0
        hist = hue_histogram(img, np.ones((4, 4)), bins=12)
        assert hist[0] == pytest.approx(1.0)
        assert hist.sum() == pytest.approx(1.0)

    def test_hue_distance_wraps(self):
        assert hue_distance(350.0, 10.0) == pytest.approx(20.0)
        assert hue_distance(0.0, 180.0) == pytest.approx(180.0)

    def test_gray_pixels_ignored(self):
        img = np.full((4, 4, 3), 0.5)
        img[0, 0] = [0.9, 0.1, 0.1]
        hist = hue_histogram(img, np.ones((4, 4)))
        assert hist[0] == pytest.approx(1.0)


class TestNormalSmoothness:
    def test_constant_normals_are_smooth(self):
        n = np.zeros((8, 8, 3))
        n[..., 2] = 1.0
        assert normal_smoothness(n, np.ones((8, 8))) == pytest.approx(0.0, abs=1e-9)

    def test_noise_increases_roughness(self):
        rng = np.random.default_rng(0)
        base = np.zeros((16, 16, 3))
        base[..., 2] = 1.0
        noisy = base + 0.2 * rng.normal(size=base.shape)
        noisy /= np.linalg.norm(noisy, axis=-1, keepdims=True)
        mask = np.ones((16, 16))
        assert normal_smoothness(noisy, mask) > normal_smoothness(base, mask)
