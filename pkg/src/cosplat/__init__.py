"""Co-trained sparse-view Gaussian splatting with disagreement-based regularization."""

from .scene import (
    Camera,
    GaussianField,
    ImageBuffer,
    SceneDataset,
    covariance_from_scale_rotation,
)

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "GaussianField",
    "ImageBuffer",
    "SceneDataset",
    "covariance_from_scale_rotation",
    "__version__",
]
