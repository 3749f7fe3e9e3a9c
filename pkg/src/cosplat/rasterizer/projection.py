"""EWA projection of 3D Gaussians to screen space, with the analytic adjoint.

A primitive with covariance S = R diag(s)^2 R^T projects to a 2D Gaussian
with covariance J W S W^T J^T where W is the world-to-camera rotation and J
the local affine Jacobian of the pinhole map. A small isotropic low-pass term
is added in screen space (3DGS convention) so every splat covers at least
a pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..rotation import (
    normalization_backward,
    rotation_matrices,
    rotation_matrix_quat_jacobian,
)
from ..scene import Camera, GaussianField

NEAR_PLANE = 0.01
LOW_PASS = 0.3
# Culling: the 2D mean must lie within 3 sigma of the image rectangle.
CULL_SIGMA = 3.0
# Rasterization footprint. At 3.5 sigma the Gaussian weight is exp(-6.125),
# so alpha stays below the 1/255 compositing threshold at the box boundary
# for any opacity; the integer box edge therefore never shows up in renders
# or gradients.
FOOTPRINT_SIGMA = 3.5


@dataclass
class Projected2DGaussian:
    mean2d: np.ndarray   # (2,) pixel coordinates
    cov2d: np.ndarray    # (2, 2) screen-space covariance, low-pass included
    depth: float         # camera-space z
    color: np.ndarray    # (3,) activated RGB
    opacity: float       # activated opacity
    source_index: int


@dataclass
class ProjectionContext:
    """Everything the backward pass needs to replay the projection."""

    camera: Camera
    n_total: int
    visible: np.ndarray        # (N,) bool
    order: np.ndarray          # (M,) field indices of visible primitives, front to back
    # Per visible-sorted primitive (M rows):
    p_cam: np.ndarray          # (M, 3)
    means2d: np.ndarray        # (M, 2)
    cov2d: np.ndarray          # (M, 2, 2)
    conics: np.ndarray         # (M, 3) packed inverse covariance (a, b, c)
    jac: np.ndarray            # (M, 2, 3)
    t_mat: np.ndarray          # (M, 2, 3) J @ W
    sigma: np.ndarray          # (M, 3, 3) world-space covariance
    m_mat: np.ndarray          # (M, 3, 3) R diag(s)
    rot_g: np.ndarray          # (M, 3, 3) primitive rotation matrices
    scales: np.ndarray         # (M, 3) activated
    opacities: np.ndarray      # (M,) activated
    colors: np.ndarray         # (M, 3) activated
    quats_raw: np.ndarray      # (M, 4) as stored in the field
    bboxes: np.ndarray         # (M, 4) int32 half-open pixel box (x0, x1, y0, y1)
    radii: np.ndarray          # (M,) footprint radius in pixels


@dataclass
class FieldGradients:
    """Gradients per parameter class, plus screen-space stats for densification."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacities_raw: np.ndarray
    colors_raw: np.ndarray
    screen_grad_norm: np.ndarray  # (N,) NDC-scaled |dL/d mean2d|, zero for culled
    visible: np.ndarray           # (N,) bool

    @classmethod
    def zeros(cls, n: int) -> "FieldGradients":
        return cls(
            positions=np.zeros((n, 3)),
            log_scales=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            opacities_raw=np.zeros((n,)),
            colors_raw=np.zeros((n, 3)),
            screen_grad_norm=np.zeros((n,)),
            visible=np.zeros((n,), dtype=bool),
        )

    def scaled(self, factor: float) -> "FieldGradients":
        return FieldGradients(
            positions=self.positions * factor,
            log_scales=self.log_scales * factor,
            rotations=self.rotations * factor,
            opacities_raw=self.opacities_raw * factor,
            colors_raw=self.colors_raw * factor,
            screen_grad_norm=self.screen_grad_norm * abs(factor),
            visible=self.visible.copy(),
        )

    def add_(self, other: "FieldGradients") -> "FieldGradients":
        self.positions += other.positions
        self.log_scales += other.log_scales
        self.rotations += other.rotations
        self.opacities_raw += other.opacities_raw
        self.colors_raw += other.colors_raw
        return self


def project_field(field: GaussianField, camera: Camera, near: float = NEAR_PLANE) -> ProjectionContext:
    n = field.count
    w_mat = camera.rotation_matrix
    height, width = camera.height, camera.width

    if n == 0:
        empty = np.zeros((0,))
        return ProjectionContext(
            camera=camera, n_total=0,
            visible=np.zeros((0,), dtype=bool), order=np.zeros((0,), dtype=np.int64),
            p_cam=np.zeros((0, 3)), means2d=np.zeros((0, 2)), cov2d=np.zeros((0, 2, 2)),
            conics=np.zeros((0, 3)), jac=np.zeros((0, 2, 3)), t_mat=np.zeros((0, 2, 3)),
            sigma=np.zeros((0, 3, 3)), m_mat=np.zeros((0, 3, 3)), rot_g=np.zeros((0, 3, 3)),
            scales=np.zeros((0, 3)), opacities=empty, colors=np.zeros((0, 3)),
            quats_raw=np.zeros((0, 4)), bboxes=np.zeros((0, 4), dtype=np.int32), radii=empty,
        )

    p_cam = field.positions @ w_mat.T + camera.translation
    z = p_cam[:, 2]
    in_front = z > near

    # Avoid dividing by tiny z for primitives that will be culled anyway.
    z_safe = np.where(in_front, z, 1.0)
    u = camera.fx * p_cam[:, 0] / z_safe + camera.cx
    v = camera.fy * p_cam[:, 1] / z_safe + camera.cy

    scales = field.scales
    quats_unit = field.unit_rotations
    rot_g = rotation_matrices(quats_unit)
    m_mat = rot_g * scales[:, None, :]
    sigma = m_mat @ m_mat.transpose(0, 2, 1)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / z_safe
    jac[:, 0, 2] = -camera.fx * p_cam[:, 0] / z_safe**2
    jac[:, 1, 1] = camera.fy / z_safe
    jac[:, 1, 2] = -camera.fy * p_cam[:, 1] / z_safe**2
    t_mat = jac @ w_mat
    cov2d = t_mat @ sigma @ t_mat.transpose(0, 2, 1)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
    lam_max = mid + disc
    sigma_px = np.sqrt(np.maximum(lam_max, 1e-12))

    cull_r = CULL_SIGMA * sigma_px
    on_screen = (
        (u >= -cull_r) & (u <= (width - 1) + cull_r) & (v >= -cull_r) & (v <= (height - 1) + cull_r)
    )
    visible = in_front & on_screen

    vis_idx = np.nonzero(visible)[0]
    order = vis_idx[np.argsort(z[vis_idx], kind="stable")]

    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=-1)

    radius = FOOTPRINT_SIGMA * sigma_px
    x0 = np.clip(np.floor(u - radius), 0, width).astype(np.int32)
    x1 = np.clip(np.floor(u + radius) + 1, 0, width).astype(np.int32)
    y0 = np.clip(np.floor(v - radius), 0, height).astype(np.int32)
    y1 = np.clip(np.floor(v + radius) + 1, 0, height).astype(np.int32)
    bboxes = np.stack([x0, x1, y0, y1], axis=-1)

    sel = order
    return ProjectionContext(
        camera=camera,
        n_total=n,
        visible=visible,
        order=order,
        p_cam=np.ascontiguousarray(p_cam[sel]),
        means2d=np.ascontiguousarray(np.stack([u, v], axis=-1)[sel]),
        cov2d=np.ascontiguousarray(cov2d[sel]),
        conics=np.ascontiguousarray(conics[sel]),
        jac=np.ascontiguousarray(jac[sel]),
        t_mat=np.ascontiguousarray(t_mat[sel]),
        sigma=np.ascontiguousarray(sigma[sel]),
        m_mat=np.ascontiguousarray(m_mat[sel]),
        rot_g=np.ascontiguousarray(rot_g[sel]),
        scales=np.ascontiguousarray(scales[sel]),
        opacities=np.ascontiguousarray(field.opacities[sel]),
        colors=np.ascontiguousarray(field.colors[sel]),
        quats_raw=np.ascontiguousarray(field.rotations[sel]),
        bboxes=np.ascontiguousarray(bboxes[sel]),
        radii=np.ascontiguousarray(radius[sel]),
    )


def project_gaussian(field: GaussianField, index: int, camera: Camera) -> Optional[Projected2DGaussian]:
    """Project one primitive; returns None when it is culled."""
    arrs = field.select(np.array([index]))
    if not all(np.all(np.isfinite(getattr(arrs, name))) for name in
               ("positions", "log_scales", "rotations", "opacities_raw", "colors_raw")):
        raise ValueError(f"primitive {index} has non-finite parameters")
    ctx = project_field(arrs, camera)
    if ctx.order.size == 0:
        return None
    return Projected2DGaussian(
        mean2d=ctx.means2d[0],
        cov2d=ctx.cov2d[0],
        depth=float(ctx.p_cam[0, 2]),
        color=ctx.colors[0],
        opacity=float(ctx.opacities[0]),
        source_index=index,
    )


def projection_backward(
    ctx: ProjectionContext,
    field: GaussianField,
    d_means2d: np.ndarray,
    d_conics: np.ndarray,
    d_colors_act: np.ndarray,
    d_opac_act: np.ndarray,
    d_z: np.ndarray,
) -> FieldGradients:
    """Chain per-splat screen-space gradients back to field parameters."""
    n = ctx.n_total
    grads = FieldGradients.zeros(n)
    m = ctx.order.size
    if m == 0:
        return grads

    cam = ctx.camera
    w_mat = cam.rotation_matrix
    x, y, z = ctx.p_cam[:, 0], ctx.p_cam[:, 1], ctx.p_cam[:, 2]

    # conic (packed) -> cov2d. Off-diagonal of the packed gradient is split
    # across the two symmetric entries.
    d_lam = np.empty((m, 2, 2))
    d_lam[:, 0, 0] = d_conics[:, 0]
    d_lam[:, 0, 1] = 0.5 * d_conics[:, 1]
    d_lam[:, 1, 0] = 0.5 * d_conics[:, 1]
    d_lam[:, 1, 1] = d_conics[:, 2]
    lam = np.empty((m, 2, 2))
    lam[:, 0, 0] = ctx.conics[:, 0]
    lam[:, 0, 1] = ctx.conics[:, 1]
    lam[:, 1, 0] = ctx.conics[:, 1]
    lam[:, 1, 1] = ctx.conics[:, 2]
    d_cov2d = -lam @ d_lam @ lam

    # cov2d = T Sigma T^T + lowpass*I
    d_sigma = ctx.t_mat.transpose(0, 2, 1) @ d_cov2d @ ctx.t_mat
    d_t = 2.0 * (d_cov2d @ ctx.t_mat @ ctx.sigma)
    d_jac = d_t @ w_mat.T

    # Pinhole mean and Jacobian entries -> camera-space position.
    fx, fy = cam.fx, cam.fy
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    d_pc = np.zeros((m, 3))
    d_pc[:, 0] = d_means2d[:, 0] * fx * inv_z
    d_pc[:, 1] = d_means2d[:, 1] * fy * inv_z
    d_pc[:, 2] = -d_means2d[:, 0] * fx * x * inv_z2 - d_means2d[:, 1] * fy * y * inv_z2
    d_pc[:, 0] += d_jac[:, 0, 2] * (-fx * inv_z2)
    d_pc[:, 1] += d_jac[:, 1, 2] * (-fy * inv_z2)
    d_pc[:, 2] += (
        d_jac[:, 0, 0] * (-fx * inv_z2)
        + d_jac[:, 0, 2] * (2.0 * fx * x * inv_z2 * inv_z)
        + d_jac[:, 1, 1] * (-fy * inv_z2)
        + d_jac[:, 1, 2] * (2.0 * fy * y * inv_z2 * inv_z)
    )
    d_pc[:, 2] += d_z

    d_pos = d_pc @ w_mat

    # Sigma = M M^T with M = R diag(s)
    d_m = 2.0 * (d_sigma @ ctx.m_mat)
    d_rot_mat = d_m * ctx.scales[:, None, :]
    d_scale = np.einsum("nrk,nrk->nk", d_m, ctx.rot_g)
    d_log_scale = d_scale * ctx.scales

    jac_q = rotation_matrix_quat_jacobian(
        ctx.quats_raw / np.linalg.norm(ctx.quats_raw, axis=-1, keepdims=True)
    )
    d_q_unit = np.einsum("nkij,nij->nk", jac_q, d_rot_mat)
    d_q = normalization_backward(ctx.quats_raw, d_q_unit)

    d_opac_raw = d_opac_act * ctx.opacities * (1.0 - ctx.opacities)
    d_col_raw = d_colors_act * ctx.colors * (1.0 - ctx.colors)

    sel = ctx.order
    grads.positions[sel] = d_pos
    grads.log_scales[sel] = d_log_scale
    grads.rotations[sel] = d_q
    grads.opacities_raw[sel] = d_opac_raw
    grads.colors_raw[sel] = d_col_raw
    # Screen-space norm in NDC units (pixel gradient scaled by half resolution),
    # matching the scale the densification threshold is quoted in.
    ndc = d_means2d * np.array([cam.width * 0.5, cam.height * 0.5])
    grads.screen_grad_norm[sel] = np.linalg.norm(ndc, axis=-1)
    grads.visible[:] = ctx.visible
    return grads
