"""Volumetric capture post-processing toolkit.

Turns calibrated multi-camera RGB-D (or RGB-only) frame sequences into
filtered depth, colored point clouds, and Gaussian-splat reconstructions,
with interchange codecs, a software renderer, and a retry-capable
file-to-file pipeline.
"""

from .camera import Camera, Intrinsics, Pose
from .depthfilter import BilateralParams, DepthMap, FlowField, GuidanceImage
from .errors import (
    InvalidGeometryError,
    InvalidInputError,
    MalformedFileError,
    ValidationError,
    VolcapError,
)
from .pointcloud import PointCloud, RadiusFilterParams
from .splats import GaussianSplat, LossParams, ScaleActivationParams, SplatFrame
from .stereo import DisparityMap, RectifiedPair

__version__ = "0.1.0"

__all__ = [
    "BilateralParams",
    "Camera",
    "DepthMap",
    "DisparityMap",
    "FlowField",
    "GaussianSplat",
    "GuidanceImage",
    "Intrinsics",
    "InvalidGeometryError",
    "InvalidInputError",
    "LossParams",
    "MalformedFileError",
    "PointCloud",
    "Pose",
    "RadiusFilterParams",
    "RectifiedPair",
    "ScaleActivationParams",
    "SplatFrame",
    "ValidationError",
    "VolcapError",
    "__version__",
]
