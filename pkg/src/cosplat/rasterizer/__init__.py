"""Differentiable CPU splatting: forward render and analytic backward.

Two interchangeable kernel backends exist: a compiled Cython core and a
pure-numpy fallback. The compiled one is picked automatically when its
extension module is importable; set COSPLAT_KERNELS=python or =compiled to
force a choice (the latter raises if the extension is missing).
"""

from __future__ import annotations

import os

from ._kernels_py import ACCUM_EPS, ALPHA_MIN, TRANSMITTANCE_MIN, KERNELS as PYTHON_KERNELS
from .projection import (
    FieldGradients,
    Projected2DGaussian,
    project_field,
    project_gaussian,
    projection_backward,
)
from .render import RenderOutput, render, render_backward

try:
    from ._kernels_cy import KERNELS as COMPILED_KERNELS
except ImportError:  # extension not built
    COMPILED_KERNELS = None


def available_kernels():
    out = {"python": PYTHON_KERNELS}
    if COMPILED_KERNELS is not None:
        out["compiled"] = COMPILED_KERNELS
    return out


def active_kernels():
    choice = os.environ.get("COSPLAT_KERNELS", "auto").strip().lower()
    if choice in ("", "auto"):
        return COMPILED_KERNELS if COMPILED_KERNELS is not None else PYTHON_KERNELS
    if choice == "python":
        return PYTHON_KERNELS
    if choice == "compiled":
        if COMPILED_KERNELS is None:
            raise RuntimeError("COSPLAT_KERNELS=compiled but the extension is not built")
        return COMPILED_KERNELS
    raise ValueError(f"unknown COSPLAT_KERNELS value {choice!r}")


__all__ = [
    "ACCUM_EPS",
    "ALPHA_MIN",
    "TRANSMITTANCE_MIN",
    "FieldGradients",
    "Projected2DGaussian",
    "RenderOutput",
    "available_kernels",
    "active_kernels",
    "project_field",
    "project_gaussian",
    "projection_backward",
    "render",
    "render_backward",
]
