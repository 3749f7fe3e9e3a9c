"""Image, point-registration and depth metrics, plus the masking study.

SSIM follows the standard recipe: 11x11 Gaussian window (sigma 1.5),
C1=0.01^2, C2=0.03^2 on a [0,1] range, averaged over channels and over
window positions fully inside the image. The same forward powers both the
metric and the D-SSIM loss term; `ssim_with_grad` adds the analytic adjoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images; capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of an (H, W) map."""
    pad = (len(window) - 1) // 2
    out = correlate1d(img, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    if pad == 0:
        return out
    return out[pad:-pad, pad:-pad]


def _filter_transpose(grad: np.ndarray, window: np.ndarray, shape) -> np.ndarray:
    """Adjoint of `_filter_valid`: zero-pad, then correlate (window is symmetric)."""
    pad = (len(window) - 1) // 2
    full = np.zeros(shape, dtype=np.float64)
    if pad:
        full[pad:-pad, pad:-pad] = grad
    else:
        full[:, :] = grad
    full = correlate1d(full, window, axis=0, mode="constant")
    full = correlate1d(full, window, axis=1, mode="constant")
    return full


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    return img


def ssim_with_grad(a: np.ndarray, b: np.ndarray, win_size: int = SSIM_WINDOW):
    """SSIM value plus gradients of the mean SSIM w.r.t. both images."""
    a3 = _as_channels(a)
    b3 = _as_channels(b)
    if a3.shape != b3.shape:
        raise ValueError(f"shape mismatch {a3.shape} vs {b3.shape}")
    h, w, channels = a3.shape
    if win_size % 2 != 1 or win_size < 1:
        raise ValueError("window size must be odd and positive")
    if min(h, w) < win_size:
        raise ValueError(f"image {h}x{w} smaller than the {win_size}-pixel window")
    window = _gaussian_window(win_size, SSIM_SIGMA)

    grad_a = np.zeros_like(a3)
    grad_b = np.zeros_like(b3)
    total = 0.0
    n_positions = (h - win_size + 1) * (w - win_size + 1) * channels
    for ch in range(channels):
        x, y = a3[:, :, ch], b3[:, :, ch]
        mu_x = _filter_valid(x, window)
        mu_y = _filter_valid(y, window)
        pxx = _filter_valid(x * x, window)
        pyy = _filter_valid(y * y, window)
        pxy = _filter_valid(x * y, window)
        a1 = 2.0 * mu_x * mu_y + SSIM_C1
        a2 = 2.0 * (pxy - mu_x * mu_y) + SSIM_C2
        b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
        b2 = (pxx - mu_x * mu_x) + (pyy - mu_y * mu_y) + SSIM_C2
        s = (a1 * a2) / (b1 * b2)
        total += float(np.sum(s))

        # Partials of mean(S) w.r.t. the filtered intermediates.
        up = 1.0 / n_positions
        d_mu_x = up * (2.0 * mu_y * (a2 - a1) / (b1 * b2) - 2.0 * mu_x * s * (1.0 / b1 - 1.0 / b2))
        d_mu_y = up * (2.0 * mu_x * (a2 - a1) / (b1 * b2) - 2.0 * mu_y * s * (1.0 / b1 - 1.0 / b2))
        d_pxx = up * (-s / b2)
        d_pyy = up * (-s / b2)
        d_pxy = up * (2.0 * a1 / (b1 * b2))

        shape = (h, w)
        grad_a[:, :, ch] = (
            _filter_transpose(d_mu_x, window, shape)
            + 2.0 * x * _filter_transpose(d_pxx, window, shape)
            + y * _filter_transpose(d_pxy, window, shape)
        )
        grad_b[:, :, ch] = (
            _filter_transpose(d_mu_y, window, shape)
            + 2.0 * y * _filter_transpose(d_pyy, window, shape)
            + x * _filter_transpose(d_pxy, window, shape)
        )

    value = total / n_positions
    if np.asarray(a).ndim == 2:
        return value, grad_a[:, :, 0], grad_b[:, :, 0]
    return value, grad_a, grad_b


def ssim(a: np.ndarray, b: np.ndarray, win_size: int = SSIM_WINDOW) -> float:
    value, _, _ = ssim_with_grad(a, b, win_size=win_size)
    return value


def dssim(a: np.ndarray, b: np.ndarray, win_size: int = SSIM_WINDOW) -> float:
    """Structural dissimilarity (1 - SSIM) / 2."""
    return (1.0 - ssim(a, b, win_size=win_size)) / 2.0


@dataclass
class MatchResult:
    """1-nearest-neighbor correspondence from a source to a target point set."""

    indices: np.ndarray    # (N,) index into the target, -1 when the target is empty
    distances: np.ndarray  # (N,) Euclidean distance, inf when the target is empty

    @property
    def count(self) -> int:
        return int(self.indices.shape[0])

    def nonmatching(self, tau: float) -> np.ndarray:
        if tau <= 0:
            raise ValueError("tau must be positive")
        return self.distances > tau


def nearest_neighbor_match(source: np.ndarray, target: np.ndarray) -> MatchResult:
    """Exact 1-NN match of each source point into the target (KD-tree)."""
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    n = source.shape[0]
    if target.shape[0] == 0:
        return MatchResult(
            indices=np.full((n,), -1, dtype=np.int64),
            distances=np.full((n,), np.inf),
        )
    tree = cKDTree(target)
    distances, indices = tree.query(source, k=1)
    return MatchResult(indices=np.asarray(indices, dtype=np.int64), distances=np.asarray(distances))


def fitness_rmse(positions_a: np.ndarray, positions_b: np.ndarray, tau: float):
    """Registration-style inlier fraction and inlier RMS distance.

    Measured in both directions and averaged. A direction with no inliers
    contributes fitness 0 and is excluded from the RMSE average; NaN is
    returned when neither direction has inliers.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    fits, rmses = [], []
    for src, dst in ((positions_a, positions_b), (positions_b, positions_a)):
        src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
        if src.shape[0] == 0:
            raise ValueError("fitness requires nonempty point sets")
        match = nearest_neighbor_match(src, dst)
        inlier = match.distances <= tau
        fits.append(float(np.mean(inlier)))
        if inlier.any():
            rmses.append(float(np.sqrt(np.mean(match.distances[inlier] ** 2))))
    fitness = 0.5 * (fits[0] + fits[1])
    rmse = float(np.mean(rmses)) if rmses else float("nan")
    return fitness, rmse


def abs_error_rel(pred_depth: np.ndarray, gt_depth: np.ndarray, valid_mask: np.ndarray) -> float:
    """Mean over valid pixels of |d - d*| / d*."""
    pred = np.asarray(pred_depth, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    mask = np.asarray(valid_mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ValueError("depth/mask shapes differ")
    if not mask.any():
        return float("nan")
    if np.any(gt[mask] <= 0):
        raise ValueError("ground-truth depth must be positive on the valid mask")
    return float(np.mean(np.abs(pred[mask] - gt[mask]) / gt[mask]))


@dataclass
class DisagreementReport:
    """Point and rendering disagreement between two fields at a set of views."""

    fitness: float
    rmse: float
    view_ids: list
    psnr_between: list          # per view, dB
    depth_abs_error_rel: list   # per view; NaN when no valid pixels

    @property
    def mean_psnr_between(self) -> float:
        return float(np.mean(self.psnr_between)) if self.psnr_between else float("nan")

    @property
    def mean_depth_abs_error_rel(self) -> float:
        vals = [v for v in self.depth_abs_error_rel if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")


DEPTH_VALID_ALPHA = 0.5


def measure_disagreement(
    field_a,
    field_b,
    cameras: Sequence,
    tau: float,
    background=(0.0, 0.0, 0.0),
    threads: int = 1,
    view_ids: Optional[list] = None,
) -> DisagreementReport:
    """Fitness/RMSE between the point sets plus PSNR / absErrorRel between renders."""
    from .rasterizer import render

    fitness, rmse = fitness_rmse(field_a.positions, field_b.positions, tau)
    psnrs, rels = [], []
    for cam in cameras:
        out_a = render(field_a, cam, background, threads=threads)
        out_b = render(field_b, cam, background, threads=threads)
        psnrs.append(psnr(out_a.color.data, out_b.color.data))
        valid = (out_a.accum_alpha.data >= DEPTH_VALID_ALPHA) & (
            out_b.accum_alpha.data >= DEPTH_VALID_ALPHA
        )
        valid &= out_b.depth.data > 0
        rels.append(abs_error_rel(out_a.depth.data, out_b.depth.data, valid))
    return DisagreementReport(
        fitness=fitness,
        rmse=rmse,
        view_ids=list(view_ids) if view_ids is not None else list(range(len(cameras))),
        psnr_between=psnrs,
        depth_abs_error_rel=rels,
    )


def masked_psnr(a: np.ndarray, b: np.ndarray, keep: np.ndarray) -> float:
    """PSNR restricted to kept pixels (all channels of each kept pixel)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    keep = np.asarray(keep, dtype=bool)
    if not keep.any():
        return float("nan")
    diff2 = (a[keep] - b[keep]) ** 2
    mse = float(np.mean(diff2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


@dataclass
class StudyRow:
    view_id: int
    percentile: int
    n_masked: int
    psnr_a: float
    psnr_b: float
    psnr_mean: float
    abs_rel_a: float = float("nan")
    abs_rel_b: float = float("nan")


def disagreement_mask_order(scores: np.ndarray) -> np.ndarray:
    """Pixel indices sorted by descending score; ties broken by pixel index."""
    flat = scores.reshape(-1)
    return np.argsort(-flat, kind="stable")


def disagreement_study(
    field_a,
    field_b,
    gt_images: Sequence[np.ndarray],
    cameras: Sequence,
    percentiles: Sequence[int] = tuple(range(0, 100, 10)),
    score: str = "color",
    gt_depths: Optional[Sequence[np.ndarray]] = None,
    background=(0.0, 0.0, 0.0),
    threads: int = 1,
) -> list:
    """Mask the top-p% most-disagreeing pixels, score the remainder against GT.

    Per view and percentile p, pixels are ranked by a per-pixel disagreement
    score between the two fields' renders (mean absolute channel difference
    for `score="color"`, relative depth difference for `score="depth"`); the
    top p% are dropped and the remaining region is compared against ground
    truth (PSNR; absErrorRel when ground-truth depths are supplied).
    """
    from .rasterizer import render

    percentiles = [int(p) for p in percentiles]
    if any(p < 0 or p >= 100 for p in percentiles):
        raise ValueError("percentiles must lie in [0, 100)")
    if score not in ("color", "depth"):
        raise ValueError(f"unknown score {score!r}")

    rows = []
    for view_id, cam in enumerate(cameras):
        out_a = render(field_a, cam, background, threads=threads)
        out_b = render(field_b, cam, background, threads=threads)
        gt = np.asarray(gt_images[view_id], dtype=np.float64)
        if score == "color":
            scores = np.mean(np.abs(out_a.color.data - out_b.color.data), axis=2)
        else:
            mean_depth = 0.5 * (out_a.depth.data + out_b.depth.data)
            scores = np.abs(out_a.depth.data - out_b.depth.data) / np.maximum(mean_depth, 1e-6)
        order = disagreement_mask_order(scores)
        n_pix = scores.size

        depth_valid = None
        gt_depth = None
        if gt_depths is not None:
            gt_depth = np.asarray(gt_depths[view_id], dtype=np.float64)
            depth_valid = (
                (gt_depth > 0)
                & (out_a.accum_alpha.data >= DEPTH_VALID_ALPHA)
                & (out_b.accum_alpha.data >= DEPTH_VALID_ALPHA)
            )

        for p in percentiles:
            n_masked = int(n_pix * p / 100)
            keep = np.ones(n_pix, dtype=bool)
            keep[order[:n_masked]] = False
            keep = keep.reshape(scores.shape)
            row = StudyRow(
                view_id=view_id,
                percentile=p,
                n_masked=n_masked,
                psnr_a=masked_psnr(out_a.color.data, gt, keep),
                psnr_b=masked_psnr(out_b.color.data, gt, keep),
                psnr_mean=float("nan"),
            )
            row.psnr_mean = 0.5 * (row.psnr_a + row.psnr_b)
            if depth_valid is not None:
                row.abs_rel_a = abs_error_rel(out_a.depth.data, gt_depth, keep & depth_valid)
                row.abs_rel_b = abs_error_rel(out_b.depth.data, gt_depth, keep & depth_valid)
            rows.append(row)
    return rows


@dataclass
class EvalRow:
    view_id: int
    psnr: float
    ssim: float
    abs_rel: float = float("nan")


@dataclass
class EvalSummary:
    rows: list
    mean_psnr: float
    mean_ssim: float
    mean_abs_rel: float = float("nan")
    fitness: float = float("nan")
    rmse: float = float("nan")


def evaluate(
    field,
    dataset,
    tau: Optional[float] = None,
    background=(0.0, 0.0, 0.0),
    threads: int = 1,
) -> EvalSummary:
    """Per-test-view PSNR/SSIM, plus point metrics against the reference field.

    When the dataset carries a ground-truth field, Fitness/RMSE are reported
    against it (threshold `tau`, default scale-relative); when it carries
    ground-truth depths, absErrorRel is reported over solidly covered pixels.
    """
    from .rasterizer import render
    from .scene import default_tau

    if dataset.n_test == 0:
        raise ValueError("dataset has no test views")
    rows = []
    for view_id, cam in enumerate(dataset.test_cameras):
        out = render(field, cam, background, threads=threads)
        gt = dataset.test_images[view_id].data
        row = EvalRow(view_id=view_id, psnr=psnr(out.color.data, gt), ssim=ssim(out.color.data, gt))
        if dataset.test_depths is not None:
            gt_depth = dataset.test_depths[view_id].data
            valid = (gt_depth > 0) & (out.accum_alpha.data >= DEPTH_VALID_ALPHA)
            row.abs_rel = abs_error_rel(out.depth.data, gt_depth, valid)
        rows.append(row)

    summary = EvalSummary(
        rows=rows,
        mean_psnr=float(np.mean([r.psnr for r in rows])),
        mean_ssim=float(np.mean([r.ssim for r in rows])),
    )
    rels = [r.abs_rel for r in rows if np.isfinite(r.abs_rel)]
    if rels:
        summary.mean_abs_rel = float(np.mean(rels))
    if dataset.ground_truth_field is not None and field.count > 0:
        if tau is None:
            tau = default_tau(dataset, 0.05)
        summary.fitness, summary.rmse = fitness_rmse(
            field.positions, dataset.ground_truth_field.positions, tau
        )
    return summary
