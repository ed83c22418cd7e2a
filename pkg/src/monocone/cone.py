"""Canonical 3D cone keypoint model in the cone-base frame F_w.

The seven keypoints (stored 0-based; keypoint index k in file formats
and correspondences is the row k-1):

    1  apex
    2  left upper stripe boundary      5  right upper stripe boundary
    3  left lower stripe boundary      6  right lower stripe boundary
    4  left base corner                7  right base corner

Both arms (apex down one silhouette edge to a base corner) are collinear
4-point chains lying in the x-z plane of F_w, with z up and the origin
at the base center.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from .geometry import cross_ratio

# Rows of the 7-point array forming the left/right arm, apex first.
ARM_LEFT = (0, 1, 2, 3)
ARM_RIGHT = (0, 4, 5, 6)

# Cross-ratio measured on a real cone's arm.
CR_3D = 1.39408

# Small-cone proportions (meters): 0.325 tall on a 0.228-wide base.
CONE_HEIGHT = 0.325
BASE_HALF_WIDTH = 0.114

COLOR_CLASSES = ("blue", "yellow", "orange")


def arm_parameters(cr: float = CR_3D, a: float = 0.4) -> np.ndarray:
    """Line parameters of the four arm keypoints, apex (t=0) to base (t=1).

    With points at parameters (0, a, b, 1) on a straight arm, the
    cross-ratio reduces to b(1-a)/(b-a); solving for b places the lower
    stripe boundary so that the arm's cross-ratio equals ``cr`` exactly.
    """
    if not 0.0 < a < 1.0:
        raise ValueError("interior parameter a must lie in (0, 1)")
    b = cr * a / (cr + a - 1.0)
    if not a < b < 1.0:
        raise ValueError(f"cross-ratio {cr} with a={a} has no valid interior solution")
    return np.array([0.0, a, b, 1.0])


@dataclass(frozen=True)
class ConeModel:
    """Seven ordered keypoints (7, 3) in F_w plus the arm cross-ratio."""

    keypoints3d: np.ndarray
    color_class: str
    cr3d: float

    def __post_init__(self):
        pts = np.array(self.keypoints3d, dtype=np.float64).reshape(7, 3)
        pts.flags.writeable = False
        object.__setattr__(self, "keypoints3d", pts)
        if self.color_class not in COLOR_CLASSES:
            raise ValueError(f"unknown color class {self.color_class!r}")

    @property
    def apex(self) -> np.ndarray:
        return self.keypoints3d[0]

    def arm_points(self, arm) -> np.ndarray:
        return self.keypoints3d[list(arm)]

    def with_color(self, color_class: str) -> "ConeModel":
        return replace(self, color_class=color_class)


def default_cone_model(color_class: str = "blue") -> ConeModel:
    """Cone of height 0.325 m and base half-width 0.114 m with arm
    keypoints placed so each arm's 3D cross-ratio equals 1.39408."""
    t = arm_parameters()
    apex = np.array([0.0, 0.0, CONE_HEIGHT])
    left_base = np.array([-BASE_HALF_WIDTH, 0.0, 0.0])
    right_base = np.array([BASE_HALF_WIDTH, 0.0, 0.0])
    left = apex + t[:, None] * (left_base - apex)
    right = apex + t[:, None] * (right_base - apex)
    pts = np.vstack([left, right[1:]])
    return ConeModel(keypoints3d=pts, color_class=color_class, cr3d=CR_3D)


def _point_line_distance(points: np.ndarray) -> float:
    """Max distance of interior points from the line through the endpoints."""
    a, b = points[0], points[-1]
    d = b - a
    norm = np.linalg.norm(d)
    if norm == 0.0:
        return float(np.max(np.linalg.norm(points - a, axis=1)))
    rel = points[1:-1] - a
    proj = np.outer(rel @ d / norm**2, d)
    return float(np.max(np.linalg.norm(rel - proj, axis=1)))


def validate(model: ConeModel) -> list:
    """Check model invariants; returns the list of violations (empty if ok)."""
    violations = []
    pts = model.keypoints3d
    if not np.all(np.isfinite(pts)):
        violations.append("non-finite keypoint coordinates")
        return violations
    if not np.all(pts[0, 2] > pts[1:, 2]):
        violations.append("apex not maximal in z")
    for idx in (3, 6):
        if abs(pts[idx, 2]) > 1e-9:
            violations.append(f"base corner {idx + 1} not at z = 0")
    for name, arm in (("left", ARM_LEFT), ("right", ARM_RIGHT)):
        arm_pts = pts[list(arm)]
        if _point_line_distance(arm_pts) > 1e-9:
            violations.append(f"{name} arm not collinear")
            continue
        cr = cross_ratio(*arm_pts)
        if abs(cr - model.cr3d) > 1e-6:
            violations.append(f"{name} arm cross-ratio mismatch ({cr:.6f} vs {model.cr3d})")
    return violations


def save_model(model: ConeModel, path) -> None:
    """Write the model as a human-readable JSON config (key = keypoint index)."""
    doc = {
        "color_class": model.color_class,
        "cr3d": model.cr3d,
        "keypoints_m": {str(i + 1): [float(c) for c in model.keypoints3d[i]] for i in range(7)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_model(path) -> ConeModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    pts = np.array([doc["keypoints_m"][str(i + 1)] for i in range(7)], dtype=np.float64)
    return ConeModel(keypoints3d=pts, color_class=doc["color_class"], cr3d=float(doc["cr3d"]))
