"""Domain types: Gaussian fields, cameras, images, datasets.

A Gaussian field is a structure-of-arrays collection of anisotropic 3D
Gaussian primitives. Scale, opacity and color are stored pre-activation
(log-scale / logits); the activated values are exposed as properties so the
optimizer works in an unconstrained space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .rotation import normalize_quaternions, rotation_matrices

# Parameter classes in canonical order. Gradients, Adam moments and the field
# itself all use these attribute names.
PARAM_NAMES = ("positions", "log_scales", "rotations", "opacities_raw", "colors_raw")


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("logit input must lie strictly inside (0, 1)")
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianField:
    """Structure-of-arrays set of 3D Gaussian primitives."""

    positions: np.ndarray      # (N, 3) centers, scene units
    log_scales: np.ndarray     # (N, 3) log of per-axis scale
    rotations: np.ndarray      # (N, 4) quaternions (w, x, y, z), kept ~unit
    opacities_raw: np.ndarray  # (N,) pre-sigmoid opacity
    colors_raw: np.ndarray     # (N, 3) pre-sigmoid RGB

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacities_raw)

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.colors_raw)

    @property
    def unit_rotations(self) -> np.ndarray:
        return normalize_quaternions(self.rotations)

    @classmethod
    def empty(cls) -> "GaussianField":
        return cls(
            positions=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            opacities_raw=np.zeros((0,)),
            colors_raw=np.zeros((0, 3)),
        )

    @classmethod
    def from_activated(
        cls,
        positions: np.ndarray,
        scales: np.ndarray,
        rotations: np.ndarray,
        opacities: np.ndarray,
        colors: np.ndarray,
    ) -> "GaussianField":
        """Build a field from activated values (positive scales, (0,1) opacity/color)."""
        scales = np.asarray(scales, dtype=np.float64)
        if np.any(scales <= 0):
            raise ValueError("scales must be strictly positive")
        return cls(
            positions=np.array(positions, dtype=np.float64).reshape(-1, 3),
            log_scales=np.log(scales).reshape(-1, 3),
            rotations=normalize_quaternions(
                np.array(rotations, dtype=np.float64).reshape(-1, 4)
            ),
            opacities_raw=logit(np.asarray(opacities, dtype=np.float64).reshape(-1)),
            colors_raw=logit(np.asarray(colors, dtype=np.float64).reshape(-1, 3)),
        )

    def validate(self) -> None:
        n = self.count
        shapes = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacities_raw": (n,),
            "colors_raw": (n, 3),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    def select(self, index: np.ndarray) -> "GaussianField":
        """New field keeping rows given by a boolean mask or index array."""
        return GaussianField(
            positions=self.positions[index].copy(),
            log_scales=self.log_scales[index].copy(),
            rotations=self.rotations[index].copy(),
            opacities_raw=self.opacities_raw[index].copy(),
            colors_raw=self.colors_raw[index].copy(),
        )

    def copy(self) -> "GaussianField":
        return GaussianField(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacities_raw=self.opacities_raw.copy(),
            colors_raw=self.colors_raw.copy(),
        )

    def equals(self, other: "GaussianField") -> bool:
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in PARAM_NAMES
        )


def concat_fields(a: GaussianField, b: GaussianField) -> GaussianField:
    return GaussianField(
        positions=np.concatenate([a.positions, b.positions], axis=0),
        log_scales=np.concatenate([a.log_scales, b.log_scales], axis=0),
        rotations=np.concatenate([a.rotations, b.rotations], axis=0),
        opacities_raw=np.concatenate([a.opacities_raw, b.opacities_raw], axis=0),
        colors_raw=np.concatenate([a.colors_raw, b.colors_raw], axis=0),
    )


def build_covariances(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Covariances (N, 3, 3) from activated scales and (unit) quaternions."""
    rot = rotation_matrices(normalize_quaternions(rotations))
    m = rot * np.atleast_2d(scales)[:, None, :]  # R @ diag(s)
    return m @ m.transpose(0, 2, 1)


def covariance_from_scale_rotation(s: Sequence[float], q: Sequence[float]) -> np.ndarray:
    """3x3 covariance of one primitive: R(q) diag(s)^2 R(q)^T."""
    s = np.asarray(s, dtype=np.float64).reshape(3)
    q = np.asarray(q, dtype=np.float64).reshape(4)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(q))):
        raise ValueError("scale and rotation must be finite")
    if np.any(s <= 0):
        raise ValueError("scale components must be strictly positive")
    return build_covariances(s[None, :], q[None, :])[0]


@dataclass
class Camera:
    """Pinhole camera: intrinsics plus a rigid world-to-camera pose.

    A world point p maps to camera space as R p + t, then to pixel
    coordinates (fx x/z + cx, fy y/z + cy). Pixel centers sit at integer
    coordinates.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (4,) world-to-camera quaternion
    translation: np.ndarray  # (3,) world-to-camera translation

    def __post_init__(self):
        self.rotation = normalize_quaternions(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")

    @property
    def rotation_matrix(self) -> np.ndarray:
        return rotation_matrices(self.rotation[None, :])[0]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation_matrix.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation_matrix.T + self.translation

    @classmethod
    def look_at(
        cls,
        eye: np.ndarray,
        target: np.ndarray,
        width: int,
        height: int,
        fov_deg: float = 40.0,
        up: Sequence[float] = (0.0, 1.0, 0.0),
    ) -> "Camera":
        """Camera at `eye` looking toward `target` (OpenCV axes: x right, y down, z forward)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(forward)
        if norm == 0:
            raise ValueError("eye and target coincide")
        z_axis = forward / norm
        up = np.asarray(up, dtype=np.float64)
        x_axis = np.cross(up, z_axis)
        x_norm = np.linalg.norm(x_axis)
        if x_norm < 1e-12:  # looking along the up axis
            x_axis = np.cross(np.array([0.0, 0.0, 1.0]), z_axis)
            x_norm = np.linalg.norm(x_axis)
        x_axis /= x_norm
        y_axis = np.cross(z_axis, x_axis)
        rot = np.stack([x_axis, y_axis, z_axis], axis=0)  # world-to-camera
        quat = _quaternion_from_matrix(rot)
        trans = -rot @ eye
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(
            fx=f,
            fy=f,
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            width=width,
            height=height,
            rotation=quat,
            translation=trans,
        )


def _quaternion_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix (Shepperd's method)."""
    m = np.asarray(rot, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return q / np.linalg.norm(q)


@dataclass
class ImageBuffer:
    """Row-major float image; (H, W) for one channel, (H, W, 3) for color."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3 and self.data.shape[2] == 1:
            self.data = self.data[:, :, 0]
        if self.data.ndim not in (2, 3) or (self.data.ndim == 3 and self.data.shape[2] != 3):
            raise ValueError(f"unsupported image shape {self.data.shape}")

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return 3 if self.data.ndim == 3 else 1

    def validate(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")


@dataclass
class SceneDataset:
    """Cameras and reference images for training and evaluation."""

    train_cameras: list
    test_cameras: list
    train_images: list          # list[ImageBuffer], one per train camera
    test_images: list           # list[ImageBuffer], one per test camera
    test_depths: Optional[list] = None   # depth 0 marks invalid pixels
    ground_truth_field: Optional[GaussianField] = None
    scene_bounds: np.ndarray = field(
        default_factory=lambda: np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    )

    def __post_init__(self):
        self.scene_bounds = np.asarray(self.scene_bounds, dtype=np.float64).reshape(2, 3)
        if len(self.train_cameras) != len(self.train_images):
            raise ValueError("train camera/image counts differ")
        if len(self.test_cameras) != len(self.test_images):
            raise ValueError("test camera/image counts differ")
        if self.test_depths is not None and len(self.test_depths) != len(self.test_cameras):
            raise ValueError("test camera/depth counts differ")

    @property
    def n_train(self) -> int:
        return len(self.train_cameras)

    @property
    def n_test(self) -> int:
        return len(self.test_cameras)

    @property
    def scene_diagonal(self) -> float:
        return float(np.linalg.norm(self.scene_bounds[1] - self.scene_bounds[0]))

    @property
    def camera_extent(self) -> float:
        """Radius of the training-camera bounding sphere (used to size densification)."""
        centers = np.stack([c.center for c in self.train_cameras], axis=0)
        centroid = centers.mean(axis=0)
        return float(np.max(np.linalg.norm(centers - centroid, axis=1)))


def default_tau(dataset: SceneDataset, tau_rel: float) -> float:
    """Scale-relative correspondence threshold: a fraction of the scene diagonal."""
    return tau_rel * dataset.scene_diagonal
