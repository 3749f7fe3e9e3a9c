"""Domain types: covariance construction, fields, cameras, datasets."""

import numpy as np
import pytest

from cosplat.scene import (
    Camera,
    GaussianField,
    ImageBuffer,
    SceneDataset,
    covariance_from_scale_rotation,
)


class TestCovariance:
    def test_identity(self):
        cov = covariance_from_scale_rotation((1, 1, 1), (1, 0, 0, 0))
        np.testing.assert_allclose(cov, np.eye(3), atol=1e-12)

    def test_axis_aligned_scales_square(self):
        cov = covariance_from_scale_rotation((2, 1, 1), (1, 0, 0, 0))
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_rotation_permutes_axes(self):
        # 90 degrees about z maps the x-extent onto y.
        angle = np.pi / 2
        q = (np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2))
        cov = covariance_from_scale_rotation((2, 1, 1), q)
        np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_eigenvalues_are_squared_scales(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = rng.uniform(0.1, 3.0, size=3)
            q = rng.normal(size=4)
            cov = covariance_from_scale_rotation(s, q)
            np.testing.assert_allclose(cov, cov.T, atol=1e-12)
            eig = np.sort(np.linalg.eigvalsh(cov))
            np.testing.assert_allclose(eig, np.sort(s**2), atol=1e-9)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            covariance_from_scale_rotation((np.nan, 1, 1), (1, 0, 0, 0))
        with pytest.raises(ValueError):
            covariance_from_scale_rotation((1, -1, 1), (1, 0, 0, 0))
        with pytest.raises(ValueError):
            covariance_from_scale_rotation((1, 1, 1), (0, 0, 0, 0))


class TestGaussianField:
    def test_from_activated_round_trips_activations(self):
        rng = np.random.default_rng(1)
        n = 10
        scales = rng.uniform(0.05, 2.0, (n, 3))
        opac = rng.uniform(0.01, 0.99, n)
        colors = rng.uniform(0.01, 0.99, (n, 3))
        field = GaussianField.from_activated(
            rng.normal(size=(n, 3)), scales, rng.normal(size=(n, 4)), opac, colors
        )
        np.testing.assert_allclose(field.scales, scales, rtol=1e-12)
        np.testing.assert_allclose(field.opacities, opac, rtol=1e-10)
        np.testing.assert_allclose(field.colors, colors, rtol=1e-10)
        np.testing.assert_allclose(np.linalg.norm(field.rotations, axis=1), 1.0, atol=1e-12)
        field.validate()

    def test_select_and_count(self, small_field):
        sub = small_field.select(np.array([0, 2, 4]))
        assert sub.count == 3
        assert np.array_equal(sub.positions[1], small_field.positions[2])

    def test_validate_rejects_nan(self, small_field):
        bad = small_field.copy()
        bad.positions[0, 0] = np.nan
        with pytest.raises(ValueError):
            bad.validate()

    def test_empty(self):
        field = GaussianField.empty()
        assert field.count == 0
        field.validate()


class TestCamera:
    def test_look_at_centers_target(self):
        cam = Camera.look_at(np.array([0.0, 0.0, -4.0]), np.zeros(3), 64, 64)
        p = cam.world_to_camera(np.zeros((1, 3)))
        assert p[0, 2] == pytest.approx(4.0)
        np.testing.assert_allclose(p[0, :2], 0.0, atol=1e-12)

    def test_center_inverts_pose(self):
        cam = Camera.look_at(np.array([1.0, 2.0, -3.0]), np.zeros(3), 32, 32)
        np.testing.assert_allclose(cam.center, [1.0, 2.0, -3.0], atol=1e-12)

    def test_rejects_bad_intrinsics(self):
        with pytest.raises(ValueError):
            Camera(fx=-1, fy=1, cx=0, cy=0, width=8, height=8,
                   rotation=np.array([1, 0, 0, 0]), translation=np.zeros(3))
        with pytest.raises(ValueError):
            Camera(fx=1, fy=1, cx=0, cy=0, width=0, height=8,
                   rotation=np.array([1, 0, 0, 0]), translation=np.zeros(3))


class TestImageBuffer:
    def test_shapes(self):
        img = ImageBuffer(np.zeros((4, 5, 3)))
        assert (img.height, img.width, img.channels) == (4, 5, 3)
        gray = ImageBuffer(np.zeros((4, 5)))
        assert gray.channels == 1
        with pytest.raises(ValueError):
            ImageBuffer(np.zeros((4, 5, 2)))

    def test_validate_rejects_inf(self):
        img = ImageBuffer(np.full((3, 3), np.inf))
        with pytest.raises(ValueError):
            img.validate()


class TestSceneDataset:
    def test_mismatched_lengths_rejected(self):
        cam = Camera.look_at(np.array([0, 0, -4.0]), np.zeros(3), 8, 8)
        img = ImageBuffer(np.zeros((8, 8, 3)))
        with pytest.raises(ValueError):
            SceneDataset(
                train_cameras=[cam, cam], test_cameras=[], train_images=[img], test_images=[]
            )

    def test_scene_diagonal(self):
        cam = Camera.look_at(np.array([0, 0, -4.0]), np.zeros(3), 8, 8)
        img = ImageBuffer(np.zeros((8, 8, 3)))
        ds = SceneDataset(
            train_cameras=[cam, cam],
            test_cameras=[],
            train_images=[img, img],
            test_images=[],
            scene_bounds=np.array([[0, 0, 0], [1, 1, 1]]),
        )
        assert ds.scene_diagonal == pytest.approx(np.sqrt(3))
