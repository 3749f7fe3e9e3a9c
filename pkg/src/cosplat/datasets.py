"""Synthetic scene generation and dataset directory (de)serialization.

Scenes are built from a randomly drawn reference Gaussian field inside a
unit-ish box, with cameras on a ring (or arc) looking at the origin. Train
and test images are rendered from that reference field, so exact
ground-truth images, depths and primitive positions are all available.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .fieldio import (
    load_field,
    load_image_raw,
    save_field,
    save_image_png,
    save_image_raw,
)
from .metrics import DEPTH_VALID_ALPHA
from .scene import Camera, GaussianField, ImageBuffer, SceneDataset

CAMERAS_FILE = "cameras.json"
GT_FIELD_FILE = "gt_field.bin"


def generate_synthetic_scene(
    seed: int,
    n_gaussians: int,
    n_train: int,
    n_test: int,
    resolution=(64, 64),
    *,
    camera_radius: float = 4.0,
    fov_deg: float = 40.0,
    arc_deg: float = 360.0,
    background=(0.0, 0.0, 0.0),
    threads: int = 1,
) -> SceneDataset:
    """Random reference field plus ring cameras, with images rendered from it.

    Cameras sit at `camera_radius` on an azimuth arc of `arc_deg` degrees
    (full ring by default), alternating between two elevations, all facing
    the origin; test azimuths interleave the training ones. Deterministic
    for a fixed seed.
    """
    if n_gaussians < 1:
        raise ValueError("need at least one Gaussian")
    if n_train < 2:
        raise ValueError("need at least two training views (pseudo-view sampling)")
    if n_test < 0:
        raise ValueError("negative test view count")
    width, height = (resolution, resolution) if np.isscalar(resolution) else resolution
    rng = np.random.default_rng(seed)

    positions = rng.uniform(-0.9, 0.9, size=(n_gaussians, 3))
    log_scales = rng.uniform(np.log(0.05), np.log(0.22), size=(n_gaussians, 3))
    rotations = rng.normal(size=(n_gaussians, 4))
    opacities = rng.uniform(0.55, 0.95, size=n_gaussians)
    colors = rng.uniform(0.15, 0.95, size=(n_gaussians, 3))
    field = GaussianField.from_activated(positions, np.exp(log_scales), rotations, opacities, colors)

    def ring_camera(azimuth: float, elevation: float) -> Camera:
        eye = camera_radius * np.array(
            [np.cos(azimuth) * np.cos(elevation), np.sin(elevation), np.sin(azimuth) * np.cos(elevation)]
        )
        return Camera.look_at(eye, np.zeros(3), width, height, fov_deg=fov_deg)

    arc = np.deg2rad(arc_deg)
    full_ring = arc_deg >= 360.0
    if full_ring:
        train_az = [arc * k / n_train for k in range(n_train)]
        test_az = [arc * (k + 0.5) / max(n_test, 1) for k in range(n_test)]
    else:
        # Limited arc: test views interpolate strictly between the end poses.
        train_az = [arc * k / max(n_train - 1, 1) for k in range(n_train)]
        test_az = [arc * (k + 1) / (n_test + 1) for k in range(n_test)]
    elevations = [0.30, 0.45]
    train_cameras = [ring_camera(az, elevations[k % 2]) for k, az in enumerate(train_az)]
    test_cameras = [ring_camera(az, elevations[(k + 1) % 2]) for k, az in enumerate(test_az)]

    from .rasterizer import render

    train_images, test_images, test_depths = [], [], []
    for cam in train_cameras:
        out = render(field, cam, background, threads=threads)
        train_images.append(out.color)
    for cam in test_cameras:
        out = render(field, cam, background, threads=threads)
        test_images.append(out.color)
        depth = np.where(out.accum_alpha.data >= DEPTH_VALID_ALPHA, out.depth.data, 0.0)
        test_depths.append(ImageBuffer(depth))

    return SceneDataset(
        train_cameras=train_cameras,
        test_cameras=test_cameras,
        train_images=train_images,
        test_images=test_images,
        test_depths=test_depths,
        ground_truth_field=field,
        scene_bounds=np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]),
    )


def _camera_to_json(cam: Camera) -> dict:
    return {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "quat": [float(v) for v in cam.rotation],
        "trans": [float(v) for v in cam.translation],
    }


def _camera_from_json(obj: dict) -> Camera:
    return Camera(
        fx=obj["fx"], fy=obj["fy"], cx=obj["cx"], cy=obj["cy"],
        width=obj["width"], height=obj["height"],
        rotation=np.array(obj["quat"], dtype=np.float64),
        translation=np.array(obj["trans"], dtype=np.float64),
    )


def save_dataset(dataset: SceneDataset, out_dir, force: bool = False) -> None:
    """Write cameras.json, images/ (PNG + raw floats), depths/ and gt_field.bin."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise DatasetError(f"output directory {out} is not empty (use force)")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depths").mkdir(parents=True, exist_ok=True)

    doc = {
        "format": "cosplat-dataset",
        "version": 1,
        "scene_bounds": dataset.scene_bounds.tolist(),
        "train": [_camera_to_json(c) for c in dataset.train_cameras],
        "test": [_camera_to_json(c) for c in dataset.test_cameras],
    }
    with open(out / CAMERAS_FILE, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")

    for split, images in (("train", dataset.train_images), ("test", dataset.test_images)):
        for i, img in enumerate(images):
            save_image_raw(img, out / "images" / f"{split}_{i:03d}.raw")
            save_image_png(img, out / "images" / f"{split}_{i:03d}.png")
    if dataset.test_depths is not None:
        for i, depth in enumerate(dataset.test_depths):
            save_image_raw(depth, out / "depths" / f"test_{i:03d}.raw")
    if dataset.ground_truth_field is not None:
        save_field(dataset.ground_truth_field, out / GT_FIELD_FILE)


def load_dataset(path) -> SceneDataset:
    """Read a dataset directory written by `save_dataset`."""
    root = Path(path)
    cam_path = root / CAMERAS_FILE
    if not cam_path.exists():
        raise DatasetError(f"{cam_path} not found")
    try:
        with open(cam_path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unparseable {cam_path}: {exc}") from exc
    if doc.get("format") != "cosplat-dataset":
        raise DatasetError(f"{cam_path} is not a dataset camera file")

    train_cameras = [_camera_from_json(o) for o in doc["train"]]
    test_cameras = [_camera_from_json(o) for o in doc["test"]]

    def read_images(split, count):
        images = []
        for i in range(count):
            p = root / "images" / f"{split}_{i:03d}.raw"
            if not p.exists():
                raise DatasetError(f"missing image {p}")
            images.append(load_image_raw(p))
        return images

    train_images = read_images("train", len(train_cameras))
    test_images = read_images("test", len(test_cameras))

    test_depths = None
    depth_paths = [root / "depths" / f"test_{i:03d}.raw" for i in range(len(test_cameras))]
    if all(p.exists() for p in depth_paths) and depth_paths:
        test_depths = [load_image_raw(p) for p in depth_paths]

    gt_field = None
    if (root / GT_FIELD_FILE).exists():
        gt_field = load_field(root / GT_FIELD_FILE)

    return SceneDataset(
        train_cameras=train_cameras,
        test_cameras=test_cameras,
        train_images=train_images,
        test_images=test_images,
        test_depths=test_depths,
        ground_truth_field=gt_field,
        scene_bounds=np.array(doc.get("scene_bounds", [[-1, -1, -1], [1, 1, 1]])),
    )
