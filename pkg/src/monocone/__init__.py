"""Monocular 3D traffic-cone localization from single-image keypoints."""

from .cone import ARM_LEFT, ARM_RIGHT, CR_3D, ConeModel, default_cone_model
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    backproject,
    cross_ratio,
    cross_ratio_gradient,
    default_intrinsics,
    project,
)
from .loss import KeypointSet, LossConfig, PatchToImage, keypoint_loss, keypoint_loss_gradient
from .pnp import (
    Correspondence,
    PoseEstimate,
    RansacConfig,
    cone_position,
    solve_pnp,
    solve_pnp_ransac,
)

__version__ = "0.1.0"

__all__ = [
    "ARM_LEFT",
    "ARM_RIGHT",
    "CR_3D",
    "CameraIntrinsics",
    "ConeModel",
    "Correspondence",
    "KeypointSet",
    "LossConfig",
    "PatchToImage",
    "PoseEstimate",
    "RansacConfig",
    "RigidTransform",
    "backproject",
    "cone_position",
    "cross_ratio",
    "cross_ratio_gradient",
    "default_cone_model",
    "default_intrinsics",
    "keypoint_loss",
    "keypoint_loss_gradient",
    "project",
    "solve_pnp",
    "solve_pnp_ransac",
]
