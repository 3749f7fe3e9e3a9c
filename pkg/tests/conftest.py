"""Shared fixtures and the finite-difference harness.

FD scenes are built to be differentiable at the probe point: footprints
larger than the image (so the 1/255 compositing cutoff contour lies
off-screen), moderate opacities (so per-pixel early termination never
fires), and well-separated depths (no sort flips inside the FD window).
`assert_fd_wellposed` verifies those properties instead of hoping.
"""

from __future__ import annotations

import numpy as np
import pytest

from cosplat.rasterizer import ALPHA_MIN, TRANSMITTANCE_MIN, available_kernels, render
from cosplat.rasterizer.projection import project_field
from cosplat.scene import Camera, GaussianField


def _fd_illposed_reason(field: GaussianField, camera: Camera, alpha_margin: float = 1.3):
    """Reason string when an FD probe could cross a compositing threshold, else None."""
    ctx = project_field(field, camera)
    if ctx.order.size != field.count:
        return "FD scenes must not cull any primitive"
    h, w = camera.height, camera.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    for k in range(ctx.order.size):
        a, b, c = ctx.conics[k]
        dx = xs - ctx.means2d[k, 0]
        dy = ys - ctx.means2d[k, 1]
        alpha = ctx.opacities[k] * np.exp(-0.5 * (a * dx * dx) - 0.5 * (c * dy * dy) - b * dy * dx)
        # Entirely above (or below) the compositing cutoff on screen.
        if not (alpha.min() >= alpha_margin * ALPHA_MIN or alpha.max() <= ALPHA_MIN / alpha_margin):
            return f"splat {k} straddles the alpha cutoff: [{alpha.min():.2e}, {alpha.max():.2e}]"
    z = np.sort(ctx.p_cam[:, 2])
    if z.size > 1 and np.min(np.diff(z)) <= 1e-3:
        return "depth sort could flip inside the FD window"
    out = render(field, camera, kernels=available_kernels()["python"])
    if out.transmittance.min() <= 5.0 * TRANSMITTANCE_MIN:
        return "early termination too close"
    if out.accum_alpha.data.min() <= 0.05:
        return "image not solidly covered"
    return None


def assert_fd_wellposed(field: GaussianField, camera: Camera, alpha_margin: float = 1.3):
    reason = _fd_illposed_reason(field, camera, alpha_margin)
    assert reason is None, reason


def make_fd_scene(seed: int, n: int = 12, size: int = 32):
    """Scene of large soft Gaussians fully covering a `size`-pixel image.

    Deterministically resamples (still keyed by `seed`) until the scene is
    differentiable at any FD probe: no splat straddles the alpha cutoff, no
    early termination, well-separated depths.
    """
    cam = Camera.look_at(np.array([0.0, 0.3, -4.0]), np.zeros(3), size, size, fov_deg=40.0)
    cam_b = Camera.look_at(np.array([0.8, 0.4, -3.9]), np.zeros(3), size, size, fov_deg=40.0)
    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt])
        positions = rng.uniform(-0.6, 0.6, size=(n, 3))
        positions[:, 2] += rng.uniform(-0.4, 0.4, size=n)
        scales = rng.uniform(2.5, 5.0, size=(n, 3))
        rotations = rng.normal(size=(n, 4))
        opacities = rng.uniform(0.12, 0.30, size=n)
        colors = rng.uniform(0.15, 0.85, size=(n, 3))
        field = GaussianField.from_activated(positions, scales, rotations, opacities, colors)
        if all(_fd_illposed_reason(field, c) is None for c in (cam, cam_b)):
            return field, cam, cam_b
    raise RuntimeError(f"no well-posed FD scene found for seed {seed}")


def sample_probes(field: GaussianField, n_probes: int, rng: np.random.Generator):
    """(name, index) pairs spread across all parameter classes."""
    names = ["positions", "log_scales", "rotations", "opacities_raw", "colors_raw"]
    sizes = np.array([getattr(field, n).size for n in names])
    probes = []
    for _ in range(n_probes):
        cls = int(rng.integers(0, len(names)))
        arr = getattr(field, names[cls])
        idx = np.unravel_index(int(rng.integers(0, arr.size)), arr.shape)
        probes.append((names[cls], idx))
    # Always cover every class at least once.
    for cls, name in enumerate(names):
        if not any(p[0] == name for p in probes):
            arr = getattr(field, name)
            idx = np.unravel_index(int(rng.integers(0, arr.size)), arr.shape)
            probes.append((name, idx))
    return probes


def fd_gradcheck(loss_fn, field: GaussianField, analytic, probes, h: float = 1e-4,
                 rtol: float = 1e-4, floor: float = 1e-5, atol: float = 1e-8):
    """Central finite differences vs analytic gradient over selected entries.

    Relative error uses |a - fd| / max(|a|, |fd|, floor): entries smaller than
    `floor` sit below what FD can resolve against f64 rounding noise in the
    loss, so they are held to the absolute bound `atol` instead.
    """
    worst = 0.0
    worst_probe = None
    for name, idx in probes:
        plus = field.copy()
        getattr(plus, name)[idx] += h
        minus = field.copy()
        getattr(minus, name)[idx] -= h
        fd = (loss_fn(plus) - loss_fn(minus)) / (2.0 * h)
        a = float(getattr(analytic, name)[idx])
        if max(abs(a), abs(fd)) < floor:
            assert abs(a - fd) < atol, f"tiny-gradient mismatch {abs(a - fd):.3g} at {(name, idx)}"
            continue
        err = abs(a - fd) / max(abs(a), abs(fd))
        if err > worst:
            worst = err
            worst_probe = (name, idx, a, fd)
    assert worst < rtol, f"gradient mismatch {worst:.3g} at {worst_probe}"
    return worst


@pytest.fixture(params=sorted(available_kernels().keys()))
def kernels(request):
    return available_kernels()[request.param]


@pytest.fixture
def small_field():
    rng = np.random.default_rng(3)
    n = 6
    return GaussianField(
        positions=rng.uniform(-0.5, 0.5, (n, 3)),
        log_scales=rng.uniform(np.log(0.08), np.log(0.3), (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacities_raw=rng.uniform(-1.0, 1.5, (n,)),
        colors_raw=rng.uniform(-1.5, 1.5, (n, 3)),
    )


@pytest.fixture
def small_camera():
    return Camera.look_at(np.array([0.0, 0.5, -4.0]), np.zeros(3), 32, 32, fov_deg=40.0)
