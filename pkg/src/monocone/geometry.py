"""Pinhole camera model and the cross-ratio projective invariant.

Coordinate conventions:

* Camera frame ``F_c``: x right, y down, z forward (depth).
* Image frame: pixels, origin at the top-left corner, u right, v down.
* Object frame ``F_w``: placed at the cone base, z up; the keypoint plane
  is the x-z plane.

All operations are pure functions on immutable values and are safe to
call concurrently.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, NonPositiveDepth

# Minimum depth (meters) accepted by the projection.
MIN_DEPTH = 1e-6
# Distances below this are treated as degenerate in cross-ratio denominators.
DEGENERACY_EPS = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pure pinhole intrinsics (no distortion terms)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def default_intrinsics() -> CameraIntrinsics:
    """Default synthetic camera: 2 MP sensor with a long-range lens."""
    return CameraIntrinsics(fx=1460.0, fy=1460.0, cx=800.0, cy=600.0, width=1600, height=1200)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation mapping F_w coordinates into F_c."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _readonly(np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        t = _readonly(np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("transform entries must be finite")
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (..., 3) from F_w into F_c."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return the chained transform that applies ``other`` first, then self."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def project(K: CameraIntrinsics, T: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Project 3D points (..., 3) in F_w to image pixels (..., 2).

    Points may project outside the image bounds; visibility is the
    caller's concern.  Raises NonPositiveDepth if any point has camera
    depth z <= 1e-6 m.
    """
    pc = T.apply(points)
    z = pc[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise NonPositiveDepth(f"point depth {np.min(z):.3g} m is not positive")
    u = K.fx * pc[..., 0] / z + K.cx
    v = K.fy * pc[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def backproject(K: CameraIntrinsics, pixels: np.ndarray, depth) -> np.ndarray:
    """Lift image pixels (..., 2) to camera-frame points at the given depth."""
    px = np.asarray(pixels, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    x = (px[..., 0] - K.cx) / K.fx * z
    y = (px[..., 1] - K.cy) / K.fy * z
    return np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def cross_ratio(p1, p2, p3, p4) -> np.ndarray:
    """Cross-ratio (d13/d14)/(d23/d24) of four points in 2D or 3D.

    Accepts single points of shape (D,) or batches (..., D); Euclidean
    distances are taken in the ambient dimension.  Raises
    DegenerateConfiguration when a denominator distance (d14, d23 or
    d24) falls below 1e-12.
    """
    p1, p2, p3, p4 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3, p4))
    d13 = _pairwise_dist(p1, p3)
    d14 = _pairwise_dist(p1, p4)
    d23 = _pairwise_dist(p2, p3)
    d24 = _pairwise_dist(p2, p4)
    if np.any(d14 < DEGENERACY_EPS) or np.any(d23 < DEGENERACY_EPS) or np.any(d24 < DEGENERACY_EPS):
        raise DegenerateConfiguration("cross-ratio denominator distance below 1e-12")
    return (d13 / d14) / (d23 / d24)


def cross_ratio_batch(points: np.ndarray, out_invalid: float = np.nan) -> tuple:
    """Vectorized cross-ratio for batches (..., 4, D) without raising.

    Returns ``(cr, valid)`` where invalid (degenerate-denominator)
    entries hold ``out_invalid`` and ``valid`` is a boolean mask.  Used
    by the training path, which skips degenerate samples instead of
    failing mid-epoch.
    """
    p = np.asarray(points, dtype=np.float64)
    d13 = _pairwise_dist(p[..., 0, :], p[..., 2, :])
    d14 = _pairwise_dist(p[..., 0, :], p[..., 3, :])
    d23 = _pairwise_dist(p[..., 1, :], p[..., 2, :])
    d24 = _pairwise_dist(p[..., 1, :], p[..., 3, :])
    valid = (d14 >= DEGENERACY_EPS) & (d23 >= DEGENERACY_EPS) & (d24 >= DEGENERACY_EPS)
    denom = np.where(valid, d14 * d23, 1.0)
    cr = np.where(valid, (d13 * d24) / denom, out_invalid)
    return cr, valid


def cross_ratio_gradient(p1, p2, p3, p4) -> np.ndarray:
    """Analytic gradient of the 2D cross-ratio w.r.t. the 8 coordinates.

    Returns d Cr / d (x1, y1, x2, y2, x3, y3, x4, y4) as shape (..., 8).
    """
    cr, grad = cross_ratio_gradient_batch(
        np.stack([np.asarray(p, dtype=np.float64) for p in (p1, p2, p3, p4)], axis=-2)
    )
    if not np.all(np.isfinite(cr)):
        raise DegenerateConfiguration("cross-ratio denominator distance below 1e-12")
    return grad.reshape(grad.shape[:-2] + (8,))


def cross_ratio_gradient_batch(points: np.ndarray) -> tuple:
    """Cross-ratio and its gradient for batches (..., 4, 2).

    Returns ``(cr, grad)`` with grad of shape (..., 4, 2).  Degenerate
    entries yield NaN rather than raising.

    Derivation: ln Cr = ln d13 - ln d14 - ln d23 + ln d24 and
    d ||pi - pj|| / d pi = (pi - pj) / ||pi - pj||.
    """
    p = np.asarray(points, dtype=np.float64)
    cr, valid = cross_ratio_batch(p)

    def unit_over_d2(i, j):
        diff = p[..., i, :] - p[..., j, :]
        d2 = np.sum(diff**2, axis=-1, keepdims=True)
        d2 = np.where(d2 < DEGENERACY_EPS**2, np.nan, d2)
        return diff / d2

    g = np.empty_like(p)
    g[..., 0, :] = unit_over_d2(0, 2) - unit_over_d2(0, 3)
    g[..., 1, :] = unit_over_d2(1, 3) - unit_over_d2(1, 2)
    g[..., 2, :] = unit_over_d2(2, 0) - unit_over_d2(2, 1)
    g[..., 3, :] = unit_over_d2(3, 1) - unit_over_d2(3, 0)
    grad = cr[..., None, None] * g
    grad = np.where(valid[..., None, None], grad, np.nan)
    return cr, grad


def apply_homography(H: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homography to 2D points (..., 2)."""
    p = np.asarray(points, dtype=np.float64)
    ph = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    q = ph @ np.asarray(H, dtype=np.float64).T
    return q[..., :2] / q[..., 2:3]
