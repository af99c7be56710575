import warnings

import numpy as np
import pytest

from oracles import naive_render
from splatc.core import CameraPose, GaussianPrimitive, PinholeIntrinsics, SplatMap, color_to_sh
from splatc.render import (
    depth_loss,
    isotropic_term,
    loss,
    project,
    psnr,
    rasterize,
    ssim,
)

INTR = PinholeIntrinsics(100, 100, 0, 0, 8, 8)


def splat(mean, rgb, opacity, s=(1e-3, 1e-3, 1e-3), idx=0):
    return GaussianPrimitive(mean, (1, 0, 0, 0), s, opacity, color_to_sh(rgb), insertion_index=idx)


def random_scene(rng, n, extent=0.4):
    prims = [
        GaussianPrimitive(
            mean=rng.uniform(-extent, extent, 3),
            rotation=rng.normal(size=4),
            scale=np.exp(rng.uniform(np.log(0.01), np.log(0.08), 3)),
            opacity=rng.uniform(0.2, 0.99),
            color=rng.normal(size=3),
            insertion_index=k,
        )
        for k in range(n)
    ]
    return SplatMap(prims)


class TestProject:
    def test_centre(self):
        ps = project(splat([0, 0, 2], [1, 0, 0], 0.5), CameraPose.identity(), INTR)
        np.testing.assert_allclose(ps.mean2d, [0, 0])
        assert ps.depth == 2.0

    def test_isotropic_screen_covariance(self):
        sigma = 0.05
        ps = project(splat([0, 0, 2], [1, 0, 0], 0.5, s=(sigma,) * 3), CameraPose.identity(), INTR)
        # J = diag(fx/z, fy/z) on the xy block at the optical axis
        expected = np.diag([(100 * sigma / 2) ** 2, (100 * sigma / 2) ** 2]) + 0.3 * np.eye(2)
        np.testing.assert_allclose(ps.cov2d, expected, atol=1e-12)

    def test_behind_camera_culled(self):
        assert project(splat([0, 0, -1], [1, 0, 0], 0.5), CameraPose.identity(), INTR) is None


class TestCompositing:
    intr = PinholeIntrinsics(100, 100, 4, 4, 9, 9)

    def test_single_splat(self):
        frame = rasterize(SplatMap([splat([0, 0, 2], [1, 0, 0], 1.0)]), CameraPose.identity(), self.intr)
        np.testing.assert_allclose(frame.color[4, 4], [0.99, 0, 0], atol=1e-6)
        assert frame.transmittance[4, 4] == pytest.approx(0.01)
        assert frame.depth[4, 4] == pytest.approx(0.99 * 2)

    def test_two_coincident(self):
        c1, c2 = np.array([0.2, 0.8, 0.4]), np.array([0.9, 0.1, 0.6])
        m = SplatMap([splat([0, 0, 2], c1, 0.5, idx=0), splat([0, 0, 2], c2, 0.5, idx=1)])
        frame = rasterize(m, CameraPose.identity(), self.intr)
        np.testing.assert_allclose(frame.color[4, 4], 0.5 * c1 + 0.25 * c2, atol=1e-6)

    def test_front_occludes_back(self):
        c1, c2 = np.array([1.0, 0, 0]), np.array([0, 0, 1.0])
        m = SplatMap([splat([0, 0, 3], c2, 0.5, idx=0), splat([0, 0, 2], c1, 0.5, idx=1)])
        frame = rasterize(m, CameraPose.identity(), self.intr)
        np.testing.assert_allclose(frame.color[4, 4], 0.5 * c1 + 0.25 * c2, atol=1e-6)

    def test_empty_map(self):
        frame = rasterize(SplatMap([]), CameraPose.identity(), self.intr)
        assert np.all(frame.color == 0) and np.all(frame.depth == 0) and np.all(frame.transmittance == 1)

    def test_matches_naive(self, rng):
        intr = PinholeIntrinsics(60, 60, 32, 32, 64, 64)
        pose = CameraPose.look_at([0.0, -0.3, -1.5])
        for _ in range(2):
            m = random_scene(rng, 60)
            frame = rasterize(m, pose, intr)
            color, depth, T = naive_render(m, pose, intr)
            assert np.max(np.abs(frame.color - color)) < 1e-6
            assert np.max(np.abs(frame.depth - depth)) < 1e-6
            assert np.max(np.abs(frame.transmittance - T)) < 1e-6

    def test_threads_do_not_change_output(self, rng):
        intr = PinholeIntrinsics(60, 60, 32, 32, 64, 64)
        pose = CameraPose.look_at([0.0, -1.5, 0.2])
        m = random_scene(rng, 40)
        a = rasterize(m, pose, intr, threads=1)
        b = rasterize(m, pose, intr, threads=3)
        np.testing.assert_array_equal(a.color, b.color)


class TestMetrics:
    def test_psnr(self):
        a = np.full((4, 4, 3), 0.5)
        assert psnr(a, a) == 100.0
        assert psnr(a, a + 0.1) == pytest.approx(20.0)
        assert psnr(a, a + 0.01) == pytest.approx(40.0)

    def test_psnr_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_ssim(self, rng):
        img = rng.random((16, 16, 3))
        assert ssim(img, img) == pytest.approx(1.0)
        assert ssim(img, rng.random((16, 16, 3))) < 0.5
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestLoss:
    def test_identical_spherical(self, rng):
        img = rng.random((16, 16, 3))
        m = SplatMap([splat([0, 0, 1], [1, 0, 0], 0.5, s=(0.1, 0.1, 0.1))])
        assert loss(img, img, m).total == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1(self):
        gt = np.full((16, 16, 3), 0.3)
        assert loss(gt + 0.1, gt, lam=0.0, lam_iso=0.0).total == pytest.approx(0.1)

    def test_isotropic_term(self):
        m = SplatMap([splat([0, 0, 1], [1, 0, 0], 0.5, s=(1, 1, 4))])
        assert isotropic_term(m) == pytest.approx(4 / 3)
        img = np.zeros((16, 16, 3))
        assert loss(img, img, m, lam=0.2, lam_iso=1.0).iso == pytest.approx(4 / 3)
        assert loss(img, img, m, lam=0.2, lam_iso=1.0).total == pytest.approx(4 / 3)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            loss(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))


class TestDepthLoss:
    def test_identical(self):
        d = np.full((4, 4), 2.0)
        assert depth_loss(d, d) == 0.0

    def test_constant_offset(self):
        gt = np.array([[1.0, np.nan], [2.0, 3.0]])
        assert depth_loss(gt + 0.2, gt) == pytest.approx(0.2)

    def test_all_invalid_warns(self):
        with pytest.warns(RuntimeWarning):
            assert depth_loss(np.ones((2, 2)), np.full((2, 2), np.nan)) == 0.0

    def test_transmittance_mask(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            val = depth_loss(np.array([1.0, 5.0]), np.array([1.0, 1.0]), transmittance=np.array([0.1, 0.9]))
        assert val == 0.0
