"""Pure-numpy splatting kernels (fallback backend).

Same semantics as the compiled kernels: front-to-back alpha compositing over
globally depth-sorted splats, per-pixel early termination, and a reverse
sweep for the adjoint. Vectorized over each splat's footprint, so it is
usable without the extension but roughly an order of magnitude slower.
Thread counts are ignored; results are independent of them by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALPHA_MIN = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4
ACCUM_EPS = 1e-6


@dataclass
class ForwardBuffers:
    color: np.ndarray        # (H, W, 3) composited color, background not yet applied
    depth_raw: np.ndarray    # (H, W) sum of z * weight
    accum: np.ndarray        # (H, W) sum of weights
    transmittance: np.ndarray  # (H, W) remaining transmittance
    last_contrib: np.ndarray   # (H, W) int32 sorted index of last composited splat, -1 if none


@dataclass
class PackedGrads:
    means2d: np.ndarray   # (M, 2)
    conics: np.ndarray    # (M, 3)
    colors: np.ndarray    # (M, 3)
    opacities: np.ndarray  # (M,)
    depths: np.ndarray    # (M,)


def _alpha_region(mean, conic, opacity, xs, ys):
    """Opacity-weighted Gaussian falloff over a footprint region.

    Must stay the forward/backward shared path: the reverse sweep recomputes
    alpha with exactly these operations.
    """
    dx = xs - mean[0]
    dy = ys - mean[1]
    power = (
        -0.5 * (conic[0] * dx * dx)[None, :]
        - 0.5 * (conic[2] * dy * dy)[:, None]
        - conic[1] * dy[:, None] * dx[None, :]
    )
    return opacity * np.exp(power), dx, dy


class PythonKernels:
    name = "python"

    @staticmethod
    def forward(means, conics, colors, opacities, depths, bboxes, height, width, threads=1):
        m = means.shape[0]
        color = np.zeros((height, width, 3))
        depth_raw = np.zeros((height, width))
        accum = np.zeros((height, width))
        trans = np.ones((height, width))
        done = np.zeros((height, width), dtype=bool)
        last = np.full((height, width), -1, dtype=np.int32)
        xs = np.arange(width, dtype=np.float64)
        ys = np.arange(height, dtype=np.float64)

        for k in range(m):
            x0, x1, y0, y1 = bboxes[k]
            if x0 >= x1 or y0 >= y1:
                continue
            sl = (slice(y0, y1), slice(x0, x1))
            alpha, _, _ = _alpha_region(means[k], conics[k], opacities[k], xs[x0:x1], ys[y0:y1])
            eligible = (alpha >= ALPHA_MIN) & ~done[sl]
            if not eligible.any():
                continue
            t_here = trans[sl]
            test_t = t_here * (1.0 - alpha)
            # The contribution that would push transmittance below the floor
            # is dropped and the pixel stops compositing (3DGS convention).
            saturating = eligible & (test_t < TRANSMITTANCE_MIN)
            contrib = eligible & ~saturating
            weight = np.where(contrib, alpha * t_here, 0.0)
            color[sl] += weight[:, :, None] * colors[k]
            depth_raw[sl] += weight * depths[k]
            accum[sl] += weight
            trans[sl] = np.where(contrib, test_t, t_here)
            done[sl] |= saturating
            last[sl] = np.where(contrib, np.int32(k), last[sl])

        return ForwardBuffers(color, depth_raw, accum, trans, last)

    @staticmethod
    def backward(
        means, conics, colors, opacities, depths, bboxes, height, width,
        fwd: ForwardBuffers, grad_color, grad_depth_raw, grad_accum, suffix_color_init,
        threads=1,
    ):
        m = means.shape[0]
        out = PackedGrads(
            means2d=np.zeros((m, 2)),
            conics=np.zeros((m, 3)),
            colors=np.zeros((m, 3)),
            opacities=np.zeros((m,)),
            depths=np.zeros((m,)),
        )
        suffix_c = suffix_color_init.copy()
        suffix_z = np.zeros((height, width))
        suffix_a = np.zeros((height, width))
        trans = fwd.transmittance.copy()
        xs = np.arange(width, dtype=np.float64)
        ys = np.arange(height, dtype=np.float64)

        for k in range(m - 1, -1, -1):
            x0, x1, y0, y1 = bboxes[k]
            if x0 >= x1 or y0 >= y1:
                continue
            sl = (slice(y0, y1), slice(x0, x1))
            alpha, dx, dy = _alpha_region(means[k], conics[k], opacities[k], xs[x0:x1], ys[y0:y1])
            contrib = (alpha >= ALPHA_MIN) & (fwd.last_contrib[sl] >= k)
            if not contrib.any():
                continue
            one_minus = 1.0 - alpha
            t_after = trans[sl]
            t_before = np.where(contrib, t_after / one_minus, t_after)
            weight = np.where(contrib, alpha * t_before, 0.0)

            g_c = grad_color[sl]
            out.colors[k] = np.einsum("hw,hwc->c", weight, g_c)
            out.depths[k] = float(np.sum(weight * grad_depth_raw[sl]))

            d_alpha = np.einsum(
                "hwc,hwc->hw",
                t_before[:, :, None] * colors[k] - suffix_c[sl] / one_minus[:, :, None],
                g_c,
            )
            d_alpha += (t_before * depths[k] - suffix_z[sl] / one_minus) * grad_depth_raw[sl]
            d_alpha += (t_before - suffix_a[sl] / one_minus) * grad_accum[sl]
            d_alpha = np.where(contrib, d_alpha, 0.0)

            out.opacities[k] = float(np.sum(d_alpha * (alpha / opacities[k])))
            d_power = d_alpha * alpha
            a, b, c = conics[k]
            out.means2d[k, 0] = float(np.sum(d_power * (a * dx[None, :] + b * dy[:, None])))
            out.means2d[k, 1] = float(np.sum(d_power * (b * dx[None, :] + c * dy[:, None])))
            out.conics[k, 0] = float(np.sum(d_power * (-0.5 * dx * dx)[None, :]))
            out.conics[k, 1] = float(np.sum(d_power * (-(dy[:, None] * dx[None, :]))))
            out.conics[k, 2] = float(np.sum(d_power * (-0.5 * dy * dy)[:, None]))

            suffix_c[sl] += weight[:, :, None] * colors[k]
            suffix_z[sl] += weight * depths[k]
            suffix_a[sl] += weight
            trans[sl] = t_before

        return out


KERNELS = PythonKernels()
