"""Forward rendering and the analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import RenderError
from ..scene import Camera, GaussianField, ImageBuffer, PARAM_NAMES
from ._kernels_py import ACCUM_EPS, ForwardBuffers
from .projection import (
    FieldGradients,
    ProjectionContext,
    project_field,
    projection_backward,
)


@dataclass
class ReplayData:
    """Forward-pass state retained for the adjoint."""

    ctx: ProjectionContext
    buffers: ForwardBuffers
    background: np.ndarray
    threads: int


@dataclass
class RenderOutput:
    color: ImageBuffer        # (H, W, 3) in [0, 1]
    depth: ImageBuffer        # (H, W) alpha-normalized expected depth
    accum_alpha: ImageBuffer  # (H, W) accumulated opacity
    replay: ReplayData

    @property
    def transmittance(self) -> np.ndarray:
        return self.replay.buffers.transmittance


def _check_finite(field: GaussianField) -> None:
    for name in PARAM_NAMES:
        arr = getattr(field, name)
        finite = np.isfinite(arr)
        if not finite.all():
            bad = np.nonzero(~finite.reshape(arr.shape[0], -1).all(axis=1))[0]
            idx = int(bad[0])
            raise RenderError(f"primitive {idx} has non-finite {name}", primitive_index=idx)


def render(
    field: GaussianField,
    camera: Camera,
    background=(0.0, 0.0, 0.0),
    *,
    threads: int = 1,
    kernels=None,
) -> RenderOutput:
    """Splat a field into color, expected depth and accumulated alpha buffers.

    Splats are composited front to back in camera-space depth order (ties
    broken by primitive index); remaining transmittance is filled with
    `background`.
    """
    if kernels is None:
        from . import active_kernels

        kernels = active_kernels()
    _check_finite(field)
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    ctx = project_field(field, camera)
    buffers = kernels.forward(
        ctx.means2d, ctx.conics, ctx.colors, ctx.opacities,
        np.ascontiguousarray(ctx.p_cam[:, 2]), ctx.bboxes,
        camera.height, camera.width, threads=threads,
    )
    color = buffers.color + buffers.transmittance[:, :, None] * bg
    depth = buffers.depth_raw / np.maximum(buffers.accum, ACCUM_EPS)
    return RenderOutput(
        color=ImageBuffer(color),
        depth=ImageBuffer(depth),
        accum_alpha=ImageBuffer(buffers.accum),
        replay=ReplayData(ctx=ctx, buffers=buffers, background=bg, threads=threads),
    )


def render_backward(
    field: GaussianField,
    camera: Camera,
    output: RenderOutput,
    grad_color: np.ndarray,
    grad_depth: Optional[np.ndarray] = None,
    *,
    threads: Optional[int] = None,
    kernels=None,
) -> FieldGradients:
    """Adjoint of `render` for all field parameters.

    `grad_color` must match the color buffer shape; `grad_depth`, when given,
    matches the depth buffer. Culled primitives receive zero gradients.
    """
    if kernels is None:
        from . import active_kernels

        kernels = active_kernels()
    ctx = output.replay.ctx
    buffers = output.replay.buffers
    if ctx.n_total != field.count:
        raise ValueError("render output does not belong to this field")
    h, w = camera.height, camera.width
    grad_color = np.asarray(grad_color, dtype=np.float64)
    if grad_color.shape != (h, w, 3):
        raise ValueError(f"grad_color shape {grad_color.shape} != {(h, w, 3)}")
    if grad_depth is not None:
        grad_depth = np.asarray(grad_depth, dtype=np.float64)
        if grad_depth.shape != (h, w):
            raise ValueError(f"grad_depth shape {grad_depth.shape} != {(h, w)}")

    # Depth normalization chain: depth = depth_raw / max(accum, eps).
    if grad_depth is None:
        grad_depth_raw = np.zeros((h, w))
        grad_accum = np.zeros((h, w))
    else:
        denom = np.maximum(buffers.accum, ACCUM_EPS)
        grad_depth_raw = grad_depth / denom
        grad_accum = np.where(
            buffers.accum > ACCUM_EPS,
            -grad_depth * buffers.depth_raw / (denom * denom),
            0.0,
        )

    # Background enters as bg * transmittance; seeding the suffix-color buffer
    # with it makes the per-splat alpha gradient account for it exactly.
    suffix_color_init = buffers.transmittance[:, :, None] * output.replay.background

    if threads is None:
        threads = output.replay.threads
    packed = kernels.backward(
        ctx.means2d, ctx.conics, ctx.colors, ctx.opacities,
        np.ascontiguousarray(ctx.p_cam[:, 2]), ctx.bboxes,
        h, w, buffers, grad_color, grad_depth_raw, grad_accum, suffix_color_init,
        threads=threads,
    )
    return projection_backward(
        ctx, field, packed.means2d, packed.conics, packed.colors, packed.opacities, packed.depths
    )
