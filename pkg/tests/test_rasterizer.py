"""Rasterizer: projection contracts, compositing semantics, backend parity."""

import numpy as np
import pytest

from cosplat.errors import RenderError
from cosplat.rasterizer import (
    available_kernels,
    project_gaussian,
    render,
    render_backward,
)
from cosplat.rasterizer.projection import LOW_PASS
from cosplat.scene import Camera, GaussianField


def identity_camera(size=33, f=30.0):
    return Camera(
        fx=f, fy=f, cx=(size - 1) / 2, cy=(size - 1) / 2, width=size, height=size,
        rotation=np.array([1.0, 0, 0, 0]), translation=np.zeros(3),
    )


def single_gaussian(position, scale, opacity, color):
    return GaussianField.from_activated(
        positions=np.array([position], dtype=np.float64),
        scales=np.array([scale], dtype=np.float64),
        rotations=np.array([[1.0, 0, 0, 0]]),
        opacities=np.array([opacity]),
        colors=np.array([color]),
    )


class TestProjection:
    def test_on_axis_projects_to_principal_point(self):
        cam = identity_camera()
        field = single_gaussian([0, 0, 3.0], [0.2] * 3, 0.5, [0.5] * 3)
        proj = project_gaussian(field, 0, cam)
        assert proj is not None
        np.testing.assert_allclose(proj.mean2d, [cam.cx, cam.cy], atol=1e-12)
        assert proj.depth == pytest.approx(3.0)

    def test_isotropic_cov2d_closed_form(self):
        cam = identity_camera(f=40.0)
        sigma_w, z = 0.3, 2.5
        field = single_gaussian([0, 0, z], [sigma_w] * 3, 0.5, [0.5] * 3)
        proj = project_gaussian(field, 0, cam)
        expected = (cam.fx * sigma_w / z) ** 2 * np.eye(2) + LOW_PASS * np.eye(2)
        np.testing.assert_allclose(proj.cov2d, expected, rtol=1e-9)

    def test_behind_camera_culled(self):
        cam = identity_camera()
        field = single_gaussian([0, 0, -1.0], [0.2] * 3, 0.5, [0.5] * 3)
        assert project_gaussian(field, 0, cam) is None

    def test_far_off_screen_culled(self):
        cam = identity_camera()
        field = single_gaussian([50.0, 0, 3.0], [0.01] * 3, 0.5, [0.5] * 3)
        assert project_gaussian(field, 0, cam) is None


class TestRenderForward:
    def test_empty_field(self, kernels):
        cam = identity_camera()
        out = render(GaussianField.empty(), cam, background=(0, 0, 0), kernels=kernels)
        assert np.all(out.color.data == 0)
        assert np.all(out.accum_alpha.data == 0)

    def test_background_fills_empty(self, kernels):
        cam = identity_camera()
        out = render(GaussianField.empty(), cam, background=(0.25, 0.5, 0.75), kernels=kernels)
        np.testing.assert_allclose(out.color.data[0, 0], [0.25, 0.5, 0.75])

    def test_single_opaque_gaussian_center_pixel(self, kernels):
        # One-term alpha blend: alpha' at the exact center equals the activated
        # opacity, so the center pixel is alpha * color over black.
        cam = identity_camera()
        field = single_gaussian([0, 0, 3.0], [5.0] * 3, 0.999, [0.999, 0.001, 0.001])
        out = render(field, cam, background=(0, 0, 0), kernels=kernels)
        center = out.color.data[16, 16]
        assert center[0] == pytest.approx(0.999 * 0.999, abs=1e-3)
        assert center[1] < 0.01
        assert out.depth.data[16, 16] == pytest.approx(3.0, abs=1e-9)

    def test_front_gaussian_occludes(self, kernels):
        cam = identity_camera()
        front = single_gaussian([0, 0, 2.0], [5.0] * 3, 0.999, [0.99, 0.01, 0.01])
        back = single_gaussian([0, 0, 4.0], [5.0] * 3, 0.999, [0.01, 0.99, 0.01])
        from cosplat.scene import concat_fields

        both = concat_fields(back, front)  # storage order is not depth order
        out = render(both, cam, background=(0, 0, 0), kernels=kernels)
        center = out.color.data[16, 16]
        assert center[0] > 0.9
        assert center[1] < 0.1
        assert out.depth.data[16, 16] == pytest.approx(2.0, abs=1e-2)

    def test_compositing_conservation(self, kernels, small_field, small_camera):
        out = render(small_field, small_camera, kernels=kernels)
        np.testing.assert_allclose(
            out.accum_alpha.data + out.transmittance, 1.0, atol=1e-6
        )

    def test_monotone_occlusion(self, kernels):
        # Raising the front splat's opacity moves the center pixel toward its color.
        cam = identity_camera()
        from cosplat.scene import concat_fields

        back = single_gaussian([0, 0, 4.0], [5.0] * 3, 0.9, [0.1, 0.9, 0.1])
        front_color = np.array([0.9, 0.1, 0.1])
        prev_dist = None
        for opacity in (0.2, 0.4, 0.6, 0.8, 0.95):
            front = single_gaussian([0, 0, 2.0], [5.0] * 3, opacity, front_color)
            out = render(concat_fields(back, front), cam, kernels=kernels)
            dist = np.linalg.norm(out.color.data[16, 16] - front_color)
            if prev_dist is not None:
                assert dist <= prev_dist + 1e-9
            prev_dist = dist

    def test_nonfinite_parameters_raise_with_index(self, small_field, small_camera, kernels):
        bad = small_field.copy()
        bad.positions[3, 1] = np.nan
        with pytest.raises(RenderError) as err:
            render(bad, small_camera, kernels=kernels)
        assert err.value.primitive_index == 3
        assert "3" in str(err.value)

    def test_render_deterministic(self, kernels, small_field, small_camera):
        a = render(small_field, small_camera, kernels=kernels)
        b = render(small_field, small_camera, kernels=kernels)
        assert np.array_equal(a.color.data, b.color.data)
        assert np.array_equal(a.depth.data, b.depth.data)


class TestBackendParity:
    @pytest.mark.skipif(len(available_kernels()) < 2, reason="extension not built")
    def test_forward_matches(self, small_field, small_camera):
        ks = available_kernels()
        a = render(small_field, small_camera, background=(0.2, 0.3, 0.4), kernels=ks["python"])
        b = render(small_field, small_camera, background=(0.2, 0.3, 0.4), kernels=ks["compiled"])
        np.testing.assert_allclose(a.color.data, b.color.data, rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(a.depth.data, b.depth.data, rtol=1e-12, atol=1e-13)
        assert np.array_equal(a.replay.buffers.last_contrib, b.replay.buffers.last_contrib)

    @pytest.mark.skipif(len(available_kernels()) < 2, reason="extension not built")
    def test_backward_matches(self, small_field, small_camera):
        ks = available_kernels()
        rng = np.random.default_rng(0)
        gc = rng.normal(size=(32, 32, 3))
        gd = rng.normal(size=(32, 32))
        grads = {}
        for name, k in ks.items():
            out = render(small_field, small_camera, background=(0.2, 0.3, 0.4), kernels=k)
            grads[name] = render_backward(small_field, small_camera, out, gc, gd, kernels=k)
        for attr in ("positions", "log_scales", "rotations", "opacities_raw", "colors_raw"):
            np.testing.assert_allclose(
                getattr(grads["python"], attr), getattr(grads["compiled"], attr),
                rtol=1e-9, atol=1e-12,
            )


class TestThreadInvariance:
    @pytest.mark.skipif("compiled" not in available_kernels(), reason="extension not built")
    def test_forward_and_backward_bit_identical_across_threads(self, small_field, small_camera):
        k = available_kernels()["compiled"]
        rng = np.random.default_rng(1)
        gc = rng.normal(size=(32, 32, 3))
        gd = rng.normal(size=(32, 32))
        out1 = render(small_field, small_camera, kernels=k, threads=1)
        out4 = render(small_field, small_camera, kernels=k, threads=4)
        assert np.array_equal(out1.color.data, out4.color.data)
        assert np.array_equal(out1.depth.data, out4.depth.data)
        g1 = render_backward(small_field, small_camera, out1, gc, gd, kernels=k, threads=1)
        g4 = render_backward(small_field, small_camera, out4, gc, gd, kernels=k, threads=4)
        for attr in ("positions", "log_scales", "rotations", "opacities_raw", "colors_raw"):
            assert np.array_equal(getattr(g1, attr), getattr(g4, attr))


class TestBackwardContracts:
    def test_zero_upstream_gives_zero_grads(self, kernels, small_field, small_camera):
        out = render(small_field, small_camera, kernels=kernels)
        g = render_backward(
            small_field, small_camera, out, np.zeros((32, 32, 3)), kernels=kernels
        )
        for attr in ("positions", "log_scales", "rotations", "opacities_raw", "colors_raw"):
            assert np.all(getattr(g, attr) == 0)

    def test_shape_mismatch_rejected(self, kernels, small_field, small_camera):
        out = render(small_field, small_camera, kernels=kernels)
        with pytest.raises(ValueError):
            render_backward(small_field, small_camera, out, np.zeros((16, 16, 3)), kernels=kernels)
        with pytest.raises(ValueError):
            render_backward(
                small_field, small_camera, out, np.zeros((32, 32, 3)),
                np.zeros((16, 16)), kernels=kernels,
            )

    def test_culled_primitives_get_zero_gradient(self, kernels, small_camera):
        field = GaussianField.from_activated(
            positions=np.array([[0, 0, 3.0], [0, 0, -5.0]]),  # second is behind
            scales=np.full((2, 3), 0.5),
            rotations=np.array([[1.0, 0, 0, 0]] * 2),
            opacities=np.array([0.8, 0.8]),
            colors=np.full((2, 3), 0.5),
        )
        out = render(field, small_camera, kernels=kernels)
        g = render_backward(field, small_camera, out, np.ones((32, 32, 3)), kernels=kernels)
        assert np.all(g.positions[1] == 0)
        assert np.all(g.rotations[1] == 0)
        assert not g.visible[1]
