"""Compiled backend: drives the Cython band kernels, optionally on threads.

The image is cut into fixed-height bands regardless of the thread count, and
backward partials are reduced in band order, so buffers and gradients are
bit-identical for any `threads` value.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _kernels
from ._kernels_py import ForwardBuffers, PackedGrads

BAND_HEIGHT = 16


def _bands(height: int):
    return [(y0, min(y0 + BAND_HEIGHT, height)) for y0 in range(0, height, BAND_HEIGHT)]


class CompiledKernels:
    name = "compiled"

    @staticmethod
    def forward(means, conics, colors, opacities, depths, bboxes, height, width, threads=1):
        color = np.zeros((height, width, 3))
        depth_raw = np.zeros((height, width))
        accum = np.zeros((height, width))
        trans = np.ones((height, width))
        done = np.zeros((height, width), dtype=np.int8)
        last = np.full((height, width), -1, dtype=np.int32)

        def run(band):
            _kernels.forward_band(
                means, conics, colors, opacities, depths, bboxes,
                band[0], band[1], color, depth_raw, accum, trans, done, last,
            )

        bands = _bands(height)
        if threads > 1 and len(bands) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run, bands))
        else:
            for band in bands:
                run(band)
        return ForwardBuffers(color, depth_raw, accum, trans, last)

    @staticmethod
    def backward(
        means, conics, colors, opacities, depths, bboxes, height, width,
        fwd: ForwardBuffers, grad_color, grad_depth_raw, grad_accum, suffix_color_init,
        threads=1,
    ):
        m = means.shape[0]
        bands = _bands(height)
        partials = [np.zeros((m, 10)) for _ in bands]
        grad_color = np.ascontiguousarray(grad_color)
        grad_depth_raw = np.ascontiguousarray(grad_depth_raw)
        grad_accum = np.ascontiguousarray(grad_accum)

        def run(i):
            y0, y1 = bands[i]
            # Explicit copies: the band kernel rewinds these in place.
            suffix_c = np.array(suffix_color_init[y0:y1])
            suffix_z = np.zeros((y1 - y0, width))
            suffix_a = np.zeros((y1 - y0, width))
            trans = np.array(fwd.transmittance[y0:y1])
            _kernels.backward_band(
                means, conics, colors, opacities, depths, bboxes,
                y0, y1, fwd.last_contrib, grad_color, grad_depth_raw, grad_accum,
                suffix_c, suffix_z, suffix_a, trans, partials[i],
            )

        if m > 0:
            if threads > 1 and len(bands) > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    list(pool.map(run, range(len(bands))))
            else:
                for i in range(len(bands)):
                    run(i)

        total = np.zeros((m, 10))
        for part in partials:  # fixed band order: deterministic reduction
            total += part
        return PackedGrads(
            means2d=np.ascontiguousarray(total[:, 0:2]),
            conics=np.ascontiguousarray(total[:, 2:5]),
            colors=np.ascontiguousarray(total[:, 5:8]),
            opacities=np.ascontiguousarray(total[:, 8]),
            depths=np.ascontiguousarray(total[:, 9]),
        )


KERNELS = CompiledKernels()
