"""Optimization loop: Adam, adaptive density control, N-field co-training.

One iteration renders every field at the current training view (round-robin),
adds the pseudo-view coupling term once densification has started, steps all
fields with Adam, then runs density control on its cadence. Every fifth
densification event triggers co-pruning. Per-field RNG streams make the
split sampling (and nothing else) stochastic, which is the only source of
divergence between fields that share their initialization.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .coreg import (
    co_prune,
    color_coreg_loss,
    pearson_depth_coreg,
    photometric_loss,
    sample_pseudo_view,
)
from .errors import TrainingDiverged
from .metrics import DEPTH_VALID_ALPHA, measure_disagreement
from .rasterizer import render, render_backward
from .rotation import normalize_quaternions
from .scene import PARAM_NAMES, GaussianField, SceneDataset, default_tau, logit

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15
SPLIT_CHILDREN = 2


@dataclass
class TrainConfig:
    iterations: int = 3000
    # Learning rates; position decays exponentially to its final value.
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    # Density control.
    densify_from: int = 100
    densify_until: int = -1          # -1: 60% of iterations
    densify_every: int = 100
    densify_grad_threshold: float = 2e-4
    opacity_reset_every: int = 1000
    prune_opacity_threshold: float = 0.005
    percent_dense: float = 0.01      # clone/split size split, fraction of scene extent
    split_scale_shrink: float = 1.6
    # Co-regularization.
    co_prune: bool = True
    pseudo_views: bool = True
    pearson_depth: bool = False
    pearson_weight: float = 0.1
    coprune_every_k_interleaves: int = 5
    tau: float = -1.0                # absolute threshold; -1: scale-relative
    tau_rel: float = 0.05            # fraction of the scene bounds diagonal
    lambda_dssim: float = 0.2
    lambda_pseudo: float = 1.0
    pseudo_noise_scale: float = 0.05
    # Fields and reproducibility.
    n_fields: int = 2
    seed: int = 0
    share_field_rng: bool = False    # diagnostic: identical split streams
    n_init_points: int = 200
    init_opacity: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    log_every: int = 50
    threads: int = 1

    def __post_init__(self):
        if self.densify_until < 0:
            self.densify_until = int(0.6 * self.iterations)

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("densify_every", "opacity_reset_every", "coprune_every_k_interleaves"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")
        if self.tau != -1.0 and self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.tau_rel <= 0:
            raise ValueError("tau_rel must be positive")
        if self.n_fields < 1:
            raise ValueError("n_fields must be >= 1")
        if (self.co_prune or self.pseudo_views) and self.n_fields < 2:
            raise ValueError("co-regularization needs at least two fields")

    def resolve_tau(self, dataset: SceneDataset) -> float:
        if self.tau > 0:
            return self.tau
        return default_tau(dataset, self.tau_rel)

    def position_lr(self, iteration: int) -> float:
        t = min(max(iteration / max(self.iterations, 1), 0.0), 1.0)
        return float(np.exp((1 - t) * np.log(self.lr_position) + t * np.log(self.lr_position_final)))

    def learning_rates(self, iteration: int) -> dict:
        return {
            "positions": self.position_lr(iteration),
            "log_scales": self.lr_scale,
            "rotations": self.lr_rotation,
            "opacities_raw": self.lr_opacity,
            "colors_raw": self.lr_color,
        }

    @classmethod
    def mode(cls, name: str, **overrides) -> "TrainConfig":
        """Named ablation presets for the co-regularization switches."""
        presets = {
            "baseline": dict(co_prune=False, pseudo_views=False),
            "copruning": dict(co_prune=True, pseudo_views=False),
            "pseudoview": dict(co_prune=False, pseudo_views=True),
            "corgs": dict(co_prune=True, pseudo_views=True),
        }
        if name not in presets:
            raise ValueError(f"unknown mode {name!r} (expected one of {sorted(presets)})")
        kwargs = dict(presets[name])
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class AdamState:
    """First/second moments per parameter class; rows track the field size."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_field(cls, field: GaussianField) -> "AdamState":
        return cls(
            m={name: np.zeros_like(getattr(field, name)) for name in PARAM_NAMES},
            v={name: np.zeros_like(getattr(field, name)) for name in PARAM_NAMES},
        )

    @property
    def count(self) -> int:
        return int(self.m["positions"].shape[0])

    def select(self, index: np.ndarray) -> "AdamState":
        return AdamState(
            m={k: arr[index].copy() for k, arr in self.m.items()},
            v={k: arr[index].copy() for k, arr in self.v.items()},
            step=self.step,
        )

    def append_zero_rows(self, n: int) -> "AdamState":
        def grow(arr):
            pad = np.zeros((n,) + arr.shape[1:], dtype=arr.dtype)
            return np.concatenate([arr, pad], axis=0)

        return AdamState(
            m={k: grow(arr) for k, arr in self.m.items()},
            v={k: grow(arr) for k, arr in self.v.items()},
            step=self.step,
        )


def optimize_step(field: GaussianField, state: AdamState, grads, learning_rates: dict) -> GaussianField:
    """One Adam step in pre-activation space; quaternions renormalized after."""
    state.step += 1
    t = state.step
    updated = {}
    for name in PARAM_NAMES:
        g = getattr(grads, name)
        p = getattr(field, name)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        updated[name] = p - learning_rates[name] * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    updated["rotations"] = normalize_quaternions(updated["rotations"])
    return GaussianField(**updated)


@dataclass
class DensifyReport:
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0


def densify_and_prune(
    field: GaussianField,
    state: AdamState,
    mean_grad_norms: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    scene_extent: float,
):
    """3DGS density control: clone small / split large high-gradient primitives,
    then prune nearly transparent ones.

    Split children sample their positions from the parent's Gaussian; the
    parent is removed. Returns (field, state, report).
    """
    n = field.count
    if mean_grad_norms.shape != (n,):
        raise ValueError("grad norm shape mismatch")
    report = DensifyReport()
    size_cut = config.percent_dense * scene_extent
    hot = mean_grad_norms > config.densify_grad_threshold
    max_scale = field.scales.max(axis=1) if n else np.zeros((0,))
    clone_mask = hot & (max_scale <= size_cut)
    split_mask = hot & (max_scale > size_cut)
    prune_mask = field.opacities < config.prune_opacity_threshold

    keep_mask = ~split_mask & ~prune_mask
    report.n_cloned = int(clone_mask.sum())
    report.n_split = int(split_mask.sum())
    report.n_pruned = int(prune_mask.sum())

    parts = [field.select(keep_mask)]
    state_new = state.select(keep_mask)

    clone_src = clone_mask & keep_mask
    if clone_src.any():
        parts.append(field.select(clone_src))

    if split_mask.any():
        parents = field.select(split_mask)
        children = _sample_split_children(parents, rng, config.split_scale_shrink)
        parts.append(children)

    merged = parts[0]
    from .scene import concat_fields

    for extra in parts[1:]:
        merged = concat_fields(merged, extra)
    n_new = merged.count - state_new.count
    if n_new > 0:
        state_new = state_new.append_zero_rows(n_new)
    return merged, state_new, report


def _sample_split_children(parents: GaussianField, rng: np.random.Generator, shrink: float) -> GaussianField:
    """Children positions drawn from each parent's N(mu, Sigma); scales shrunk."""
    from .rotation import rotation_matrices

    reps = np.repeat(np.arange(parents.count), SPLIT_CHILDREN)
    base = parents.select(reps)
    local = rng.normal(size=(base.count, 3)) * base.scales
    rot = rotation_matrices(base.unit_rotations)
    offsets = np.einsum("nij,nj->ni", rot, local)
    return GaussianField(
        positions=base.positions + offsets,
        log_scales=base.log_scales - np.log(shrink),
        rotations=base.rotations.copy(),
        opacities_raw=base.opacities_raw.copy(),
        colors_raw=base.colors_raw.copy(),
    )


def reset_opacities(field: GaussianField, state: AdamState, ceiling: float = 0.01) -> GaussianField:
    """Clamp activated opacities to `ceiling` and reset their Adam moments."""
    new_op = np.minimum(field.opacities, ceiling)
    out = field.copy()
    out.opacities_raw = logit(new_op)
    state.m["opacities_raw"][:] = 0.0
    state.v["opacities_raw"][:] = 0.0
    return out


def initialize_field(dataset: SceneDataset, config: TrainConfig) -> GaussianField:
    """Uniform points in the scene bounds with neighbor-distance-sized scales.

    All fields share this initialization; disagreement then develops only
    through stochastic densification.
    """
    rng = np.random.default_rng([config.seed, 0xC0511A])
    lo, hi = dataset.scene_bounds
    pts = rng.uniform(lo, hi, size=(config.n_init_points, 3))
    if config.n_init_points > 3:
        tree = cKDTree(pts)
        dist, _ = tree.query(pts, k=4)
        spacing = np.maximum(dist[:, 1:].mean(axis=1), 1e-4)
    else:
        spacing = np.full(config.n_init_points, 0.1 * float(np.linalg.norm(hi - lo)))
    scales = np.repeat(spacing[:, None] * 0.5, 3, axis=1)
    quats = np.zeros((config.n_init_points, 4))
    quats[:, 0] = 1.0
    return GaussianField.from_activated(
        positions=pts,
        scales=scales,
        rotations=quats,
        opacities=np.full(config.n_init_points, config.init_opacity),
        colors=np.full((config.n_init_points, 3), 0.5),
    )


LOG_SCHEMA_COMMENT = "# cosplat-trainlog-v1"


@dataclass
class LogRow:
    iteration: int
    losses: list
    counts: list
    fitness: float
    rmse: float
    psnr_between: float
    depth_abs_rel: float
    coprune_pruned: list     # cumulative per field
    coprune_events: int


@dataclass
class TrainingLog:
    n_fields: int
    rows: list = dc_field(default_factory=list)
    first_densify_iteration: int = -1
    densify_until: int = -1

    def header(self) -> list:
        cols = ["iteration"]
        cols += [f"loss_f{i}" for i in range(self.n_fields)]
        cols += ["fitness", "rmse", "psnr_between", "depth_abs_rel"]
        cols += [f"count_f{i}" for i in range(self.n_fields)]
        cols += [f"coprune_pruned_f{i}" for i in range(self.n_fields)]
        cols += ["coprune_events"]
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(LOG_SCHEMA_COMMENT + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        for row in self.rows:
            writer.writerow(
                [row.iteration]
                + [f"{v:.9g}" for v in row.losses]
                + [f"{row.fitness:.9g}", f"{row.rmse:.9g}", f"{row.psnr_between:.9g}", f"{row.depth_abs_rel:.9g}"]
                + list(row.counts)
                + list(row.coprune_pruned)
                + [row.coprune_events]
            )
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    def row_before(self, iteration: int) -> Optional[LogRow]:
        prior = [r for r in self.rows if r.iteration < iteration]
        return prior[-1] if prior else None

    def row_at_or_after(self, iteration: int) -> Optional[LogRow]:
        later = [r for r in self.rows if r.iteration >= iteration]
        return later[0] if later else None


@dataclass
class TrainResult:
    fields: list
    log: TrainingLog
    kept_field_index: int = 0

    @property
    def kept_field(self) -> GaussianField:
        return self.fields[self.kept_field_index]


def _probe_cameras(dataset: SceneDataset, noise_free_rng: np.random.Generator):
    """Deterministic midpoint cameras between each train view and its nearest
    neighbor, used to track rendering disagreement at unseen poses."""
    probes = []
    seen = set()
    for i in range(dataset.n_train):
        view = sample_pseudo_view(dataset.train_cameras, noise_free_rng, noise_scale=0.0, anchor_index=i)
        key = tuple(sorted(view.parent_indices))
        if key in seen:
            continue
        seen.add(key)
        probes.append(view.camera)
    return probes


def train(dataset: SceneDataset, config: TrainConfig) -> TrainResult:
    """Co-train `config.n_fields` Gaussian fields on the dataset's train views.

    Returns all trained fields (index 0 is the one kept for inference) and a
    telemetry log with per-checkpoint disagreement measurements.
    """
    config.validate()
    if dataset.n_train < 2 and config.pseudo_views:
        raise ValueError("pseudo-view co-regularization needs at least two training views")

    n_fields = config.n_fields
    tau = config.resolve_tau(dataset)
    extent = dataset.camera_extent
    background = np.asarray(config.background, dtype=np.float64).reshape(3)

    init = initialize_field(dataset, config)
    fields = [init.copy() for _ in range(n_fields)]
    states = [AdamState.for_field(f) for f in fields]

    seq = np.random.SeedSequence(config.seed)
    children = seq.spawn(n_fields + 1)
    if config.share_field_rng:
        field_rngs = [np.random.default_rng(children[0]) for _ in range(n_fields)]
    else:
        field_rngs = [np.random.default_rng(children[i]) for i in range(n_fields)]
    pseudo_rng = np.random.default_rng(children[n_fields])

    grad_accum = [np.zeros(f.count) for f in fields]
    grad_denom = [np.zeros(f.count) for f in fields]

    log = TrainingLog(n_fields=n_fields, densify_until=config.densify_until)
    probes = _probe_cameras(dataset, np.random.default_rng(0))
    densify_events = 0
    coprune_cum = [0] * n_fields
    coprune_events = 0

    first_event = -1
    for i in range(config.densify_from, config.densify_until + 1):
        if i % config.densify_every == 0:
            first_event = i
            break
    log.first_densify_iteration = first_event
    checkpoint_iters = {1, config.iterations}
    if first_event > 0:
        checkpoint_iters.add(max(first_event - 1, 1))
        checkpoint_iters.add(min(config.densify_until, config.iterations))

    def record(iteration, losses):
        counts = [f.count for f in fields]
        if n_fields >= 2 and all(c > 0 for c in counts[:2]):
            report = measure_disagreement(
                fields[0], fields[1], probes, tau, background, threads=config.threads
            )
            fit, rmse = report.fitness, report.rmse
            psnr_b = report.mean_psnr_between
            depth_rel = report.mean_depth_abs_error_rel
        else:
            fit = rmse = psnr_b = depth_rel = float("nan")
        log.rows.append(
            LogRow(
                iteration=iteration,
                losses=list(losses),
                counts=counts,
                fitness=fit,
                rmse=rmse,
                psnr_between=psnr_b,
                depth_abs_rel=depth_rel,
                coprune_pruned=list(coprune_cum),
                coprune_events=coprune_events,
            )
        )

    for iteration in range(1, config.iterations + 1):
        view_idx = (iteration - 1) % dataset.n_train
        cam = dataset.train_cameras[view_idx]
        gt = dataset.train_images[view_idx].data

        pseudo_active = config.pseudo_views and densify_events >= 1 and n_fields >= 2
        pseudo_cam = None
        pseudo_outs = None
        if pseudo_active:
            pseudo_cam = sample_pseudo_view(
                dataset.train_cameras, pseudo_rng, config.pseudo_noise_scale
            ).camera
            pseudo_outs = [
                render(f, pseudo_cam, background, threads=config.threads) for f in fields
            ]

        losses = []
        all_grads = []
        for fi, field in enumerate(fields):
            out = render(field, cam, background, threads=config.threads)
            loss, grad_img = photometric_loss(out.color.data, gt, config.lambda_dssim)
            grads = render_backward(field, cam, out, grad_img, threads=config.threads)

            if pseudo_active:
                own = pseudo_outs[fi]
                partner_terms = []
                for fj in range(n_fields):
                    if fj == fi:
                        continue
                    partner_terms.append(pseudo_outs[fj])
                norm = 1.0 / len(partner_terms)
                for other in partner_terms:
                    value, g_own, _ = color_coreg_loss(
                        own.color.data, other.color.data, config.lambda_dssim
                    )
                    loss += config.lambda_pseudo * norm * value
                    g_depth = None
                    if config.pearson_depth:
                        valid = (own.accum_alpha.data >= DEPTH_VALID_ALPHA) & (
                            other.accum_alpha.data >= DEPTH_VALID_ALPHA
                        )
                        p_val, g_da, _ = pearson_depth_coreg(
                            own.depth.data, other.depth.data, valid
                        )
                        loss += config.lambda_pseudo * norm * config.pearson_weight * p_val
                        g_depth = config.lambda_pseudo * norm * config.pearson_weight * g_da
                    pseudo_grads = render_backward(
                        field, pseudo_cam, own,
                        config.lambda_pseudo * norm * g_own, g_depth,
                        threads=config.threads,
                    )
                    grads.add_(pseudo_grads)

            if not np.isfinite(loss):
                raise TrainingDiverged(iteration, fi, loss)
            losses.append(loss)
            all_grads.append(grads)

            # Densification statistics come from the training-view render.
            grad_accum[fi] += grads.screen_grad_norm
            grad_denom[fi] += grads.visible.astype(np.float64)

        for fi in range(n_fields):
            fields[fi] = optimize_step(
                fields[fi], states[fi], all_grads[fi], config.learning_rates(iteration)
            )

        in_densify_phase = config.densify_from <= iteration <= config.densify_until
        if in_densify_phase and iteration % config.densify_every == 0:
            for fi in range(n_fields):
                denom = np.maximum(grad_denom[fi], 1.0)
                mean_norms = grad_accum[fi] / denom
                fields[fi], states[fi], _ = densify_and_prune(
                    fields[fi], states[fi], mean_norms, config, field_rngs[fi], extent
                )
                grad_accum[fi] = np.zeros(fields[fi].count)
                grad_denom[fi] = np.zeros(fields[fi].count)
                assert states[fi].count == fields[fi].count
            densify_events += 1

            if config.co_prune and n_fields >= 2 and densify_events % config.coprune_every_k_interleaves == 0:
                fields, states, reports = co_prune(fields, states, tau)
                coprune_events += 1
                for fi in range(n_fields):
                    coprune_cum[fi] += reports.n_pruned[fi]
                    if reports.guard_triggered[fi]:
                        logger.warning(
                            "co-prune guard: field %d kept as-is at iteration %d", fi, iteration
                        )
                    grad_accum[fi] = np.zeros(fields[fi].count)
                    grad_denom[fi] = np.zeros(fields[fi].count)

        if iteration <= config.densify_until and iteration % config.opacity_reset_every == 0:
            for fi in range(n_fields):
                fields[fi] = reset_opacities(fields[fi], states[fi])

        if iteration % config.log_every == 0 or iteration in checkpoint_iters:
            record(iteration, losses)

    return TrainResult(fields=fields, log=log, kept_field_index=0)
