# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled splatting kernels.

Each function processes one horizontal band of the image so callers can run
bands on a thread pool; per-pixel state lives in the caller-owned buffers and
bands touch disjoint rows. The backward pass writes per-band partial
gradients that the caller reduces in fixed band order, which makes results
independent of the thread count.
"""

from libc.math cimport exp

import numpy as np

cdef double ALPHA_MIN = 1.0 / 255.0
cdef double TRANSMITTANCE_MIN = 1e-4


def forward_band(
    double[:, ::1] means,
    double[:, ::1] conics,
    double[:, ::1] colors,
    double[::1] opacities,
    double[::1] depths,
    int[:, ::1] bboxes,
    int band_y0,
    int band_y1,
    double[:, :, ::1] color,
    double[:, ::1] depth_raw,
    double[:, ::1] accum,
    double[:, ::1] trans,
    signed char[:, ::1] done,
    int[:, ::1] last,
):
    cdef Py_ssize_t m = means.shape[0]
    cdef Py_ssize_t k, yy, xx
    cdef int x0, x1, y0, y1
    cdef double mu, mv, ca, cb, cc, opac, zk, c0, c1, c2
    cdef double dx, dy, power, alpha, t_here, test_t, w

    with nogil:
        for k in range(m):
            x0 = bboxes[k, 0]
            x1 = bboxes[k, 1]
            y0 = bboxes[k, 2]
            y1 = bboxes[k, 3]
            if y0 < band_y0:
                y0 = band_y0
            if y1 > band_y1:
                y1 = band_y1
            if x0 >= x1 or y0 >= y1:
                continue
            mu = means[k, 0]
            mv = means[k, 1]
            ca = conics[k, 0]
            cb = conics[k, 1]
            cc = conics[k, 2]
            opac = opacities[k]
            zk = depths[k]
            c0 = colors[k, 0]
            c1 = colors[k, 1]
            c2 = colors[k, 2]
            for yy in range(y0, y1):
                dy = yy - mv
                for xx in range(x0, x1):
                    if done[yy, xx]:
                        continue
                    dx = xx - mu
                    power = -0.5 * (ca * dx * dx) - 0.5 * (cc * dy * dy) - cb * dy * dx
                    alpha = opac * exp(power)
                    if alpha < ALPHA_MIN:
                        continue
                    t_here = trans[yy, xx]
                    test_t = t_here * (1.0 - alpha)
                    if test_t < TRANSMITTANCE_MIN:
                        done[yy, xx] = 1
                        continue
                    w = alpha * t_here
                    color[yy, xx, 0] += w * c0
                    color[yy, xx, 1] += w * c1
                    color[yy, xx, 2] += w * c2
                    depth_raw[yy, xx] += w * zk
                    accum[yy, xx] += w
                    trans[yy, xx] = test_t
                    last[yy, xx] = <int> k


def backward_band(
    double[:, ::1] means,
    double[:, ::1] conics,
    double[:, ::1] colors,
    double[::1] opacities,
    double[::1] depths,
    int[:, ::1] bboxes,
    int band_y0,
    int band_y1,
    int[:, ::1] last,
    double[:, :, ::1] grad_color,
    double[:, ::1] grad_draw,
    double[:, ::1] grad_accum,
    double[:, :, ::1] suffix_c,
    double[:, ::1] suffix_z,
    double[:, ::1] suffix_a,
    double[:, ::1] trans,
    double[:, ::1] partial,
):
    """Reverse sweep over one band.

    `suffix_*` and `trans` are band-local buffers (band rows only), seeded by
    the caller: suffix_c with background*final transmittance, trans with the
    final transmittance. `partial` is (M, 10): d_mean(2), d_conic(3),
    d_color(3), d_opacity, d_depth.
    """
    cdef Py_ssize_t m = means.shape[0]
    cdef Py_ssize_t k, yy, xx, ly
    cdef int x0, x1, y0, y1
    cdef double mu, mv, ca, cb, cc, opac, zk, c0, c1, c2
    cdef double dx, dy, power, alpha, one_minus, t_before, w
    cdef double g0, g1, g2, gd, ga, d_alpha, d_power

    with nogil:
        for k in range(m - 1, -1, -1):
            x0 = bboxes[k, 0]
            x1 = bboxes[k, 1]
            y0 = bboxes[k, 2]
            y1 = bboxes[k, 3]
            if y0 < band_y0:
                y0 = band_y0
            if y1 > band_y1:
                y1 = band_y1
            if x0 >= x1 or y0 >= y1:
                continue
            mu = means[k, 0]
            mv = means[k, 1]
            ca = conics[k, 0]
            cb = conics[k, 1]
            cc = conics[k, 2]
            opac = opacities[k]
            zk = depths[k]
            c0 = colors[k, 0]
            c1 = colors[k, 1]
            c2 = colors[k, 2]
            for yy in range(y0, y1):
                ly = yy - band_y0
                dy = yy - mv
                for xx in range(x0, x1):
                    if last[yy, xx] < <int> k:
                        continue
                    dx = xx - mu
                    power = -0.5 * (ca * dx * dx) - 0.5 * (cc * dy * dy) - cb * dy * dx
                    alpha = opac * exp(power)
                    if alpha < ALPHA_MIN:
                        continue
                    one_minus = 1.0 - alpha
                    t_before = trans[ly, xx] / one_minus
                    w = alpha * t_before

                    g0 = grad_color[yy, xx, 0]
                    g1 = grad_color[yy, xx, 1]
                    g2 = grad_color[yy, xx, 2]
                    gd = grad_draw[yy, xx]
                    ga = grad_accum[yy, xx]

                    partial[k, 5] += w * g0
                    partial[k, 6] += w * g1
                    partial[k, 7] += w * g2
                    partial[k, 9] += w * gd

                    d_alpha = (
                        (t_before * c0 - suffix_c[ly, xx, 0] / one_minus) * g0
                        + (t_before * c1 - suffix_c[ly, xx, 1] / one_minus) * g1
                        + (t_before * c2 - suffix_c[ly, xx, 2] / one_minus) * g2
                        + (t_before * zk - suffix_z[ly, xx] / one_minus) * gd
                        + (t_before - suffix_a[ly, xx] / one_minus) * ga
                    )
                    partial[k, 8] += d_alpha * (alpha / opac)
                    d_power = d_alpha * alpha
                    partial[k, 0] += d_power * (ca * dx + cb * dy)
                    partial[k, 1] += d_power * (cb * dx + cc * dy)
                    partial[k, 2] += d_power * (-0.5 * dx * dx)
                    partial[k, 3] += d_power * (-(dy * dx))
                    partial[k, 4] += d_power * (-0.5 * dy * dy)

                    suffix_c[ly, xx, 0] += w * c0
                    suffix_c[ly, xx, 1] += w * c1
                    suffix_c[ly, xx, 2] += w * c2
                    suffix_z[ly, xx] += w * zk
                    suffix_a[ly, xx] += w
                    trans[ly, xx] = t_before
