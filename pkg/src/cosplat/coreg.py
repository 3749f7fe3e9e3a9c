"""Cross-field regularization: co-pruning and pseudo-view photometric coupling.

Two (or more) fields trained on the same views drift apart where the data
underconstrains them. Primitives with no counterpart within a distance
threshold in every other field are pruned; renders at views interpolated
between neighboring training cameras are pulled toward each other with an
L1 + D-SSIM penalty that backpropagates into both fields.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .metrics import MatchResult, nearest_neighbor_match, ssim_with_grad
from .rotation import slerp
from .scene import Camera, GaussianField


def knn_match(source: GaussianField, target: GaussianField) -> MatchResult:
    """Nearest counterpart in `target` for every primitive of `source`.

    An empty target yields an all-nonmatching result (infinite distances)
    rather than an error.
    """
    return nearest_neighbor_match(source.positions, target.positions)


def nonmatching_mask(match: MatchResult, tau: float) -> np.ndarray:
    """Primitives whose nearest counterpart lies strictly farther than tau."""
    return match.nonmatching(tau)


@dataclass
class CoPruneReport:
    n_pruned: list            # per field
    guard_triggered: list     # per field: pruning skipped to avoid emptying it

    @property
    def total_pruned(self) -> int:
        return int(sum(self.n_pruned))


def co_prune_masks(fields: Sequence[GaussianField], tau: float) -> list:
    """Removal masks, one per field, computed on pre-prune snapshots.

    A primitive is marked when it is nonmatching with respect to *any* other
    field. Symmetric: all masks are derived from the same snapshots before
    anything is removed.
    """
    if len(fields) < 2:
        raise ValueError("co-pruning needs at least two fields")
    masks = []
    for i, field in enumerate(fields):
        mask = np.zeros(field.count, dtype=bool)
        for j, other in enumerate(fields):
            if i == j:
                continue
            mask |= nonmatching_mask(knn_match(field, other), tau)
        masks.append(mask)
    return masks


def co_prune(fields: Sequence[GaussianField], optimizer_states: Optional[Sequence], tau: float):
    """Prune nonmatching primitives from every field (snapshot semantics).

    Returns (fields, optimizer_states, report). A field that would end up
    empty is left untouched and flagged in the report.
    """
    masks = co_prune_masks(fields, tau)
    new_fields, new_states = [], []
    n_pruned, guards = [], []
    for i, field in enumerate(fields):
        keep = ~masks[i]
        if not keep.any() and field.count > 0:
            # Degenerate-scene guard: never empty a field.
            new_fields.append(field)
            new_states.append(optimizer_states[i] if optimizer_states is not None else None)
            n_pruned.append(0)
            guards.append(True)
            continue
        new_fields.append(field.select(keep))
        if optimizer_states is not None:
            new_states.append(optimizer_states[i].select(keep))
        else:
            new_states.append(None)
        n_pruned.append(int(masks[i].sum()))
        guards.append(False)
    report = CoPruneReport(n_pruned=n_pruned, guard_triggered=guards)
    if optimizer_states is None:
        return new_fields, None, report
    return new_fields, new_states, report


@dataclass
class PseudoView:
    """Camera interpolated between a training view and its nearest neighbor."""

    camera: Camera
    parent_indices: tuple


def sample_pseudo_view(
    train_cameras: Sequence[Camera],
    rng: np.random.Generator,
    noise_scale: float = 0.05,
    anchor_index: Optional[int] = None,
) -> PseudoView:
    """Midpoint camera between a random training view and its nearest neighbor.

    The position is the midpoint of the two camera centers plus isotropic
    Gaussian noise scaled by `noise_scale` times the pair distance; the
    rotation is the half-way slerp of the two poses.
    """
    n = len(train_cameras)
    if n < 2:
        raise ValueError("pseudo views need at least two training cameras")
    if anchor_index is None:
        anchor_index = int(rng.integers(0, n))
    centers = np.stack([c.center for c in train_cameras], axis=0)
    dists = np.linalg.norm(centers - centers[anchor_index], axis=1)
    dists[anchor_index] = np.inf
    partner = int(np.argmin(dists))
    pair_dist = float(np.linalg.norm(centers[partner] - centers[anchor_index]))

    midpoint = 0.5 * (centers[anchor_index] + centers[partner])
    eps = rng.normal(0.0, 1.0, size=3) * (noise_scale * pair_dist)
    position = midpoint + eps

    ca, cb = train_cameras[anchor_index], train_cameras[partner]
    if pair_dist == 0.0:
        quat = ca.rotation.copy()
    else:
        quat = slerp(ca.rotation, cb.rotation, 0.5)
    from .rotation import rotation_matrices

    rot = rotation_matrices(quat[None, :])[0]
    camera = Camera(
        fx=ca.fx, fy=ca.fy, cx=ca.cx, cy=ca.cy,
        width=ca.width, height=ca.height,
        rotation=quat,
        translation=-rot @ position,
    )
    return PseudoView(camera=camera, parent_indices=(anchor_index, partner))


def l1_with_grad(a: np.ndarray, b: np.ndarray):
    """Mean absolute difference and its gradients w.r.t. both images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return value, grad, -grad


def photometric_loss(render_img: np.ndarray, target: np.ndarray, lambda_dssim: float, win_size: int = 11):
    """(1 - lambda) L1 + lambda D-SSIM against a fixed target.

    Returns the loss and its gradient w.r.t. the rendered image only.
    """
    l1, g_l1, _ = l1_with_grad(render_img, target)
    s, g_s, _ = ssim_with_grad(render_img, target, win_size=win_size)
    value = (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - s) / 2.0
    grad = (1.0 - lambda_dssim) * g_l1 + lambda_dssim * (-0.5) * g_s
    return value, grad


def color_coreg_loss(render_a: np.ndarray, render_b: np.ndarray, lambda_dssim: float, win_size: int = 11):
    """Mutual photometric coupling between two renders of the same view.

    Returns (loss, grad_a, grad_b); the gradients flow into both renders.
    """
    l1, g1a, g1b = l1_with_grad(render_a, render_b)
    s, gsa, gsb = ssim_with_grad(render_a, render_b, win_size=win_size)
    value = (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - s) / 2.0
    grad_a = (1.0 - lambda_dssim) * g1a + lambda_dssim * (-0.5) * gsa
    grad_b = (1.0 - lambda_dssim) * g1b + lambda_dssim * (-0.5) * gsb
    return value, grad_a, grad_b


def total_loss(
    train_render: np.ndarray,
    train_gt: np.ndarray,
    pseudo_renders: Optional[tuple],
    lambda_dssim: float = 0.2,
    lambda_pseudo: float = 1.0,
    win_size: int = 11,
):
    """Training-view photometric loss plus the pseudo-view coupling term.

    `pseudo_renders` is a pair (own, other) of renders at the shared pseudo
    view, or None when the coupling is inactive. Returns (loss,
    grad_train_render, grad_pseudo_own, grad_pseudo_other).
    """
    value, grad_train = photometric_loss(train_render, train_gt, lambda_dssim, win_size=win_size)
    if pseudo_renders is None or lambda_pseudo == 0.0:
        return value, grad_train, None, None
    own, other = pseudo_renders
    r_value, g_own, g_other = color_coreg_loss(own, other, lambda_dssim, win_size=win_size)
    value += lambda_pseudo * r_value
    return value, grad_train, lambda_pseudo * g_own, lambda_pseudo * g_other


def pearson_depth_coreg(depth_a: np.ndarray, depth_b: np.ndarray, valid_mask: np.ndarray):
    """1 - Pearson correlation between two depth maps over valid pixels.

    Returns (loss, grad_a, grad_b) with gradients over the full maps (zero
    outside the mask). Degenerate inputs (fewer than two valid pixels or a
    constant map) give loss 0 with zero gradients.
    """
    depth_a = np.asarray(depth_a, dtype=np.float64)
    depth_b = np.asarray(depth_b, dtype=np.float64)
    mask = np.asarray(valid_mask, dtype=bool)
    if depth_a.shape != depth_b.shape or depth_a.shape != mask.shape:
        raise ValueError("depth/mask shapes differ")
    grad_a = np.zeros_like(depth_a)
    grad_b = np.zeros_like(depth_b)
    n = int(mask.sum())
    if n < 2:
        return 0.0, grad_a, grad_b
    a = depth_a[mask]
    b = depth_b[mask]
    ac = a - a.mean()
    bc = b - b.mean()
    var_a = float(np.dot(ac, ac))
    var_b = float(np.dot(bc, bc))
    if var_a == 0.0 or var_b == 0.0:
        import warnings

        warnings.warn("constant depth map: Pearson depth loss defined as 0", RuntimeWarning)
        return 0.0, grad_a, grad_b
    sa, sb = np.sqrt(var_a), np.sqrt(var_b)
    r = float(np.dot(ac, bc) / (sa * sb))
    # d(r)/da = (bc - r * sb/sa * ac) / (sa * sb); loss = 1 - r
    grad_a[mask] = -(bc - r * (sb / sa) * ac) / (sa * sb)
    grad_b[mask] = -(ac - r * (sa / sb) * bc) / (sa * sb)
    return 1.0 - r, grad_a, grad_b
