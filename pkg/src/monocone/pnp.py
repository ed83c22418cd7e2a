"""RANSAC Perspective-n-Point with Levenberg-Marquardt refinement.

Pose initialization uses the model-plane-to-image homography (normalized
DLT, then decomposition against the intrinsics): the seven cone keypoints
are coplanar, which makes a general DLT degenerate but the planar route
exact.  LM then minimizes the sum of squared reprojection errors over the
6 pose parameters, parameterized by local increments (delta-rotation
applied on the left, delta-translation added).

Orientation is estimated and reported but downstream consumers use only
the translation, which is the cone position in the camera frame.

The kernels at the bottom are numba-compiled (see ``_accel``); they carry
a pure-numpy fallback selected by ``MONOCONE_NUMBA=0``.
"""

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from ._accel import jit_kernel
from .errors import BehindCamera, InsufficientPoints, NoConsensus, NoConvergence
from .geometry import CameraIntrinsics, RigidTransform
from .seeding import substream

LM_MAX_ITER = 100
LM_STEP_TOL = 1e-10
LM_LAMBDA0 = 1e-3
# LM budget for RANSAC minimal-subset hypotheses; the winner is refitted
# with the full budget.
HYPOTHESIS_LM_ITER = 25


@dataclass(frozen=True)
class Correspondence:
    """One 2D-3D pair: image pixels vs model point in F_w (keypoint index 1..7)."""

    image_point: np.ndarray
    model_point: np.ndarray
    index: int

    def __post_init__(self):
        object.__setattr__(self, "image_point", np.array(self.image_point, dtype=np.float64).reshape(2))
        object.__setattr__(self, "model_point", np.array(self.model_point, dtype=np.float64).reshape(3))


def correspondences_from_keypoints(image_points: np.ndarray, model_points: np.ndarray) -> list:
    """Zip image keypoints (n, 2) with model keypoints (n, 3), indexed 1..n."""
    image_points = np.asarray(image_points, dtype=np.float64)
    model_points = np.asarray(model_points, dtype=np.float64)
    return [
        Correspondence(image_points[i], model_points[i], i + 1)
        for i in range(len(image_points))
    ]


@dataclass(frozen=True)
class PoseEstimate:
    """Recovered pose of F_w in F_c; only ``translation`` feeds downstream."""

    translation: np.ndarray
    rotation: np.ndarray
    inlier_mask: np.ndarray
    mean_reprojection_error: float

    def __post_init__(self):
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        m = np.array(self.inlier_mask, dtype=bool)
        for a in (t, r, m):
            a.flags.writeable = False
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "inlier_mask", m)
        if not t[2] > 0:
            raise ValueError("cone translation must have positive depth")
        if self.mean_reprojection_error < 0:
            raise ValueError("mean reprojection error must be non-negative")

    @property
    def depth(self) -> float:
        return float(self.translation[2])


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 100
    inlier_threshold: float = 2.0
    min_inliers: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier threshold must be positive")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be at least 4")


def _unpack(corrs) -> tuple:
    pts3 = np.ascontiguousarray([c.model_point for c in corrs], dtype=np.float64)
    pts2 = np.ascontiguousarray([c.image_point for c in corrs], dtype=np.float64)
    return pts3, pts2


def _finalize(K, pts3, pts2, R, t, cost, mask=None):
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t)) and math.isfinite(cost)):
        raise NoConvergence("pose optimization produced a non-finite result")
    depths = pts3 @ R[2] + t[2]
    if np.any(depths <= 0) or t[2] <= 0:
        raise BehindCamera("converged pose places model points behind the camera")
    errs = _reproj_errors(K.fx, K.fy, K.cx, K.cy, R, t, pts3, pts2)
    if mask is None:
        mask = np.ones(len(pts3), dtype=bool)
    mean_err = float(np.mean(errs[mask])) if np.any(mask) else float(np.mean(errs))
    return PoseEstimate(
        translation=t, rotation=R, inlier_mask=mask, mean_reprojection_error=mean_err
    )


def solve_pnp(corrs, K: CameraIntrinsics, initial: RigidTransform = None) -> PoseEstimate:
    """Pose from >= 4 coplanar 2D-3D correspondences.

    Initializes from the planar homography unless ``initial`` is given,
    then runs LM to convergence (step norm < 1e-10 or 100 iterations).
    """
    if len(corrs) < 4:
        raise InsufficientPoints(f"need at least 4 correspondences, got {len(corrs)}")
    pts3, pts2 = _unpack(corrs)
    if initial is not None:
        R0, t0 = initial.rotation.copy(), initial.translation.copy()
    else:
        R0, t0, ok = _init_pose(pts3, pts2, K.fx, K.fy, K.cx, K.cy)
        if not ok:
            raise NoConvergence("homography initialization failed")
    R, t, cost, _ = _lm_refine(
        K.fx, K.fy, K.cx, K.cy, R0, t0, pts3, pts2, LM_MAX_ITER, LM_STEP_TOL, LM_LAMBDA0
    )
    return _finalize(K, pts3, pts2, R, t, cost)


def _minimal_subsets(pts3: np.ndarray, n: int, cfg: RansacConfig) -> np.ndarray:
    """Size-4 index subsets, skipping ones whose model points contain a
    (near-)collinear triple, for which the homography is underdetermined.

    For n <= 7 all C(n, 4) subsets are enumerated (35 for the 7 cone
    keypoints) -- cheap, deterministic, and strictly better than random
    sampling; cfg.max_iterations governs random sampling for larger n.
    """
    if n <= 7:
        candidates = np.array(list(combinations(range(n), 4)), dtype=np.int64)
    else:
        rng = substream(cfg.seed, "ransac")
        candidates = np.array(
            [rng.choice(n, size=4, replace=False) for _ in range(cfg.max_iterations)],
            dtype=np.int64,
        )
    keep = []
    for row in candidates:
        pts = pts3[row]
        degenerate = False
        for (i, j, k) in combinations(range(4), 3):
            d1 = pts[j] - pts[i]
            d2 = pts[k] - pts[i]
            area = np.linalg.norm(np.cross(d1, d2))
            if area < 1e-9 * max(np.linalg.norm(d1) * np.linalg.norm(d2), 1e-12):
                degenerate = True
                break
        if not degenerate:
            keep.append(row)
    return np.array(keep, dtype=np.int64).reshape(-1, 4)


def solve_pnp_ransac(corrs, K: CameraIntrinsics, cfg: RansacConfig = None) -> PoseEstimate:
    """Hypothesize-and-verify PnP over minimal 4-point subsets.

    Inliers are counted by per-point reprojection error below
    cfg.inlier_threshold; the best hypothesis is refitted with LM on its
    full inlier set.  Deterministic given cfg.seed.
    """
    cfg = cfg or RansacConfig()
    n = len(corrs)
    if n < 4:
        raise InsufficientPoints(f"need at least 4 correspondences, got {n}")
    pts3, pts2 = _unpack(corrs)
    subsets = _minimal_subsets(pts3, n, cfg)
    if len(subsets) == 0:
        raise NoConsensus("no non-degenerate minimal subsets available")
    R, t, mask, found = _ransac_core(
        pts3,
        pts2,
        K.fx,
        K.fy,
        K.cx,
        K.cy,
        subsets,
        float(cfg.inlier_threshold),
        int(cfg.min_inliers),
    )
    if not found:
        raise NoConsensus(
            f"no hypothesis reached {cfg.min_inliers} inliers at {cfg.inlier_threshold} px"
        )
    return _finalize(K, pts3, pts2, R, t, 0.0, mask=mask)


def cone_position(estimate: PoseEstimate, camera_to_vehicle: RigidTransform) -> np.ndarray:
    """Cone base position in the ego-vehicle frame."""
    return camera_to_vehicle.apply(estimate.translation)


# ---------------------------------------------------------------------------
# Kernels (numba-compiled unless MONOCONE_NUMBA=0).


@jit_kernel
def _so3_exp(w):
    """Rodrigues: rotation matrix for an axis-angle 3-vector."""
    theta = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    R = np.eye(3)
    if theta < 1e-12:
        kx, ky, kz = w[0], w[1], w[2]
        R[0, 1] -= kz
        R[0, 2] += ky
        R[1, 0] += kz
        R[1, 2] -= kx
        R[2, 0] -= ky
        R[2, 1] += kx
        return R
    kx, ky, kz = w[0] / theta, w[1] / theta, w[2] / theta
    c = math.cos(theta)
    s = math.sin(theta)
    C = 1.0 - c
    R[0, 0] = c + kx * kx * C
    R[0, 1] = kx * ky * C - kz * s
    R[0, 2] = kx * kz * C + ky * s
    R[1, 0] = ky * kx * C + kz * s
    R[1, 1] = c + ky * ky * C
    R[1, 2] = ky * kz * C - kx * s
    R[2, 0] = kz * kx * C - ky * s
    R[2, 1] = kz * ky * C + kx * s
    R[2, 2] = c + kz * kz * C
    return R


@jit_kernel
def _residual_jacobian(fx, fy, cx, cy, R, t, pts3, obs):
    """Reprojection residuals (2n,), Jacobian (2n, 6) w.r.t. the local
    increment (dtheta, dt) with R <- exp(dtheta) R, and the scalar cost.

    Returns ok=False when any point depth is non-positive.
    """
    n = pts3.shape[0]
    r = np.zeros(2 * n)
    J = np.zeros((2 * n, 6))
    cost = 0.0
    ok = True
    for i in range(n):
        qx = R[0, 0] * pts3[i, 0] + R[0, 1] * pts3[i, 1] + R[0, 2] * pts3[i, 2]
        qy = R[1, 0] * pts3[i, 0] + R[1, 1] * pts3[i, 1] + R[1, 2] * pts3[i, 2]
        qz = R[2, 0] * pts3[i, 0] + R[2, 1] * pts3[i, 1] + R[2, 2] * pts3[i, 2]
        X = qx + t[0]
        Y = qy + t[1]
        Z = qz + t[2]
        if Z <= 1e-9:
            ok = False
            return r, J, np.inf, ok
        iz = 1.0 / Z
        u = fx * X * iz + cx
        v = fy * Y * iz + cy
        ru = u - obs[i, 0]
        rv = v - obs[i, 1]
        r[2 * i] = ru
        r[2 * i + 1] = rv
        cost += ru * ru + rv * rv
        # Chain rule: d(u,v)/dXc times dXc/d(dtheta, dt), where
        # dXc/dtheta = -[q]x with q = R p (rotation perturbed on the left)
        # and dXc/dt = I.
        du0 = fx * iz
        du2 = -fx * X * iz * iz
        dv1 = fy * iz
        dv2 = -fy * Y * iz * iz
        J[2 * i, 0] = du2 * qy
        J[2 * i, 1] = du0 * qz - du2 * qx
        J[2 * i, 2] = -du0 * qy
        J[2 * i, 3] = du0
        J[2 * i, 5] = du2
        J[2 * i + 1, 0] = -dv1 * qz + dv2 * qy
        J[2 * i + 1, 1] = -dv2 * qx
        J[2 * i + 1, 2] = dv1 * qx
        J[2 * i + 1, 4] = dv1
        J[2 * i + 1, 5] = dv2
    return r, J, cost, ok


@jit_kernel
def _reproj_errors(fx, fy, cx, cy, R, t, pts3, obs):
    """Per-point Euclidean reprojection error in pixels (inf behind camera)."""
    n = pts3.shape[0]
    errs = np.empty(n)
    for i in range(n):
        X = R[0, 0] * pts3[i, 0] + R[0, 1] * pts3[i, 1] + R[0, 2] * pts3[i, 2] + t[0]
        Y = R[1, 0] * pts3[i, 0] + R[1, 1] * pts3[i, 1] + R[1, 2] * pts3[i, 2] + t[1]
        Z = R[2, 0] * pts3[i, 0] + R[2, 1] * pts3[i, 1] + R[2, 2] * pts3[i, 2] + t[2]
        if Z <= 1e-9:
            errs[i] = np.inf
            continue
        du = fx * X / Z + cx - obs[i, 0]
        dv = fy * Y / Z + cy - obs[i, 1]
        errs[i] = math.sqrt(du * du + dv * dv)
    return errs


@jit_kernel
def _lm_refine(fx, fy, cx, cy, R0, t0, pts3, obs, max_iter, step_tol, lam0):
    """Levenberg-Marquardt over local pose increments.

    Damping scales the normal-equation diagonal: x10 on a rejected step,
    x0.1 on an accepted one.  Accepted cost never increases.
    """
    R = R0.copy()
    t = t0.copy()
    r, J, cost, ok = _residual_jacobian(fx, fy, cx, cy, R, t, pts3, obs)
    if not ok:
        return R, t, np.inf, 0
    lam = lam0
    it = 0
    while it < max_iter:
        it += 1
        A = J.T @ J
        g = J.T @ r
        D = A.copy()
        for k in range(6):
            D[k, k] += lam * max(A[k, k], 1e-12)
        delta = np.linalg.solve(D, -g)
        Rn = _so3_exp(delta[:3]) @ R
        tn = t + delta[3:]
        rn, Jn, costn, okn = _residual_jacobian(fx, fy, cx, cy, Rn, tn, pts3, obs)
        if okn and costn < cost:
            R, t, r, J, cost = Rn, tn, rn, Jn, costn
            lam = max(lam * 0.1, 1e-12)
            step = math.sqrt(np.sum(delta * delta))
            if step < step_tol:
                break
        else:
            lam *= 10.0
            if lam > 1e14:
                break
    return R, t, cost, it


@jit_kernel
def _homography_dlt(src, dst):
    """Normalized-DLT homography mapping src (n, 2) to dst (n, 2).

    ok=False when the constraint matrix has no unique null direction
    (degenerate configuration).
    """
    n = src.shape[0]
    H = np.eye(3)
    # Hartley normalization of both point sets.
    mean_s = np.zeros(2)
    mean_d = np.zeros(2)
    for i in range(n):
        mean_s += src[i]
        mean_d += dst[i]
    mean_s /= n
    mean_d /= n
    scale_s = 0.0
    scale_d = 0.0
    for i in range(n):
        ds = src[i] - mean_s
        dd = dst[i] - mean_d
        scale_s += math.sqrt(ds[0] * ds[0] + ds[1] * ds[1])
        scale_d += math.sqrt(dd[0] * dd[0] + dd[1] * dd[1])
    scale_s /= n
    scale_d /= n
    if scale_s < 1e-12 or scale_d < 1e-12:
        return H, False
    fs = math.sqrt(2.0) / scale_s
    fd = math.sqrt(2.0) / scale_d
    A = np.zeros((2 * n, 9))
    for i in range(n):
        x = (src[i, 0] - mean_s[0]) * fs
        y = (src[i, 1] - mean_s[1]) * fs
        u = (dst[i, 0] - mean_d[0]) * fd
        v = (dst[i, 1] - mean_d[1]) * fd
        A[2 * i, 0] = -x
        A[2 * i, 1] = -y
        A[2 * i, 2] = -1.0
        A[2 * i, 6] = u * x
        A[2 * i, 7] = u * y
        A[2 * i, 8] = u
        A[2 * i + 1, 3] = -x
        A[2 * i + 1, 4] = -y
        A[2 * i + 1, 5] = -1.0
        A[2 * i + 1, 6] = v * x
        A[2 * i + 1, 7] = v * y
        A[2 * i + 1, 8] = v
    _, s, vt = np.linalg.svd(A)
    if s[7] <= 1e-10 * s[0]:
        return H, False
    h = vt[8].copy()
    Hn = h.reshape(3, 3)
    # Denormalize: H = Td^-1 Hn Ts
    Ts = np.array(
        [[fs, 0.0, -fs * mean_s[0]], [0.0, fs, -fs * mean_s[1]], [0.0, 0.0, 1.0]]
    )
    Td_inv = np.array(
        [[1.0 / fd, 0.0, mean_d[0]], [0.0, 1.0 / fd, mean_d[1]], [0.0, 0.0, 1.0]]
    )
    H = Td_inv @ Hn @ Ts
    return H, True


@jit_kernel
def _init_pose(pts3, pts2, fx, fy, cx, cy):
    """Pose initialization by planar-homography decomposition.

    Builds in-plane 2D coordinates from the model points' principal
    axes, estimates the plane-to-image homography, and decomposes it
    against the intrinsics, picking the sign that puts the plane in
    front of the camera.
    """
    n = pts3.shape[0]
    R = np.eye(3)
    t = np.zeros(3)
    centroid = np.zeros(3)
    for i in range(n):
        centroid += pts3[i]
    centroid /= n
    M = pts3 - centroid
    _, _, vt = np.linalg.svd(M)
    e1 = vt[0]
    e2 = vt[1]
    # Right-handed in-plane basis (e3 = e1 x e2).
    e3 = np.array(
        [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ]
    )
    plane = np.empty((n, 2))
    for i in range(n):
        plane[i, 0] = M[i, 0] * e1[0] + M[i, 1] * e1[1] + M[i, 2] * e1[2]
        plane[i, 1] = M[i, 0] * e2[0] + M[i, 1] * e2[1] + M[i, 2] * e2[2]
    H, ok = _homography_dlt(plane, pts2)
    if not ok:
        return R, t, False
    Kinv = np.array(
        [[1.0 / fx, 0.0, -cx / fx], [0.0, 1.0 / fy, -cy / fy], [0.0, 0.0, 1.0]]
    )
    B = Kinv @ H
    n1 = math.sqrt(B[0, 0] ** 2 + B[1, 0] ** 2 + B[2, 0] ** 2)
    n2 = math.sqrt(B[0, 1] ** 2 + B[1, 1] ** 2 + B[2, 1] ** 2)
    if n1 < 1e-12 or n2 < 1e-12:
        return R, t, False
    lam = 2.0 / (n1 + n2)
    # Centroid depth (R c + t)_z = lam * B[2, 2]; demand it positive.
    if B[2, 2] * lam < 0.0:
        lam = -lam
    r1 = lam * B[:, 0]
    r2 = lam * B[:, 1]
    r3 = np.array(
        [
            r1[1] * r2[2] - r1[2] * r2[1],
            r1[2] * r2[0] - r1[0] * r2[2],
            r1[0] * r2[1] - r1[1] * r2[0],
        ]
    )
    Q = np.empty((3, 3))
    Q[:, 0] = r1
    Q[:, 1] = r2
    Q[:, 2] = r3
    u, _, vtq = np.linalg.svd(Q)
    Qr = u @ vtq
    if np.linalg.det(Qr) < 0.0:
        ud = u.copy()
        ud[:, 2] = -ud[:, 2]
        Qr = ud @ vtq
    E = np.empty((3, 3))
    E[:, 0] = e1
    E[:, 1] = e2
    E[:, 2] = e3
    R = Qr @ E.T
    t = lam * B[:, 2] - R @ centroid
    # All model points must sit in front of the camera.
    for i in range(n):
        z = R[2, 0] * pts3[i, 0] + R[2, 1] * pts3[i, 1] + R[2, 2] * pts3[i, 2] + t[2]
        if z <= 1e-9:
            return R, t, False
    return R, t, True


@jit_kernel
def _ransac_core(pts3, pts2, fx, fy, cx, cy, subsets, threshold, min_inliers):
    """Enumerate minimal subsets, score by inlier count (ties by mean
    inlier error), refit the winner on its inliers with the full LM
    budget.  Returns (R, t, inlier_mask, found)."""
    n = pts3.shape[0]
    m = subsets.shape[0]
    best_count = 0
    best_err = np.inf
    best_R = np.eye(3)
    best_t = np.zeros(3)
    best_mask = np.zeros(n, dtype=np.bool_)
    found = False
    sub3 = np.empty((4, 3))
    sub2 = np.empty((4, 2))
    for s in range(m):
        for k in range(4):
            idx = subsets[s, k]
            sub3[k] = pts3[idx]
            sub2[k] = pts2[idx]
        R0, t0, ok = _init_pose(sub3, sub2, fx, fy, cx, cy)
        if not ok:
            continue
        R1, t1, cost, _ = _lm_refine(
            fx, fy, cx, cy, R0, t0, sub3, sub2, 25, 1e-10, 1e-3
        )
        if not math.isfinite(cost):
            continue
        errs = _reproj_errors(fx, fy, cx, cy, R1, t1, pts3, pts2)
        count = 0
        err_sum = 0.0
        for i in range(n):
            if errs[i] < threshold:
                count += 1
                err_sum += errs[i]
        if count < min_inliers:
            continue
        mean_err = err_sum / count
        if count > best_count or (count == best_count and mean_err < best_err):
            best_count = count
            best_err = mean_err
            best_R = R1.copy()
            best_t = t1.copy()
            for i in range(n):
                best_mask[i] = errs[i] < threshold
            found = True
    if not found:
        return best_R, best_t, best_mask, False
    # Refit on the consensus set.
    in3 = np.empty((best_count, 3))
    in2 = np.empty((best_count, 2))
    j = 0
    for i in range(n):
        if best_mask[i]:
            in3[j] = pts3[i]
            in2[j] = pts2[i]
            j += 1
    R2, t2, cost2, _ = _lm_refine(
        fx, fy, cx, cy, best_R, best_t, in3, in2, 100, 1e-10, 1e-3
    )
    if math.isfinite(cost2):
        errs2 = _reproj_errors(fx, fy, cx, cy, R2, t2, pts3, pts2)
        count2 = 0
        for i in range(n):
            if errs2[i] < threshold:
                count2 += 1
        if count2 >= min_inliers:
            mask2 = np.zeros(n, dtype=np.bool_)
            for i in range(n):
                mask2[i] = errs2[i] < threshold
            return R2, t2, mask2, True
    return best_R, best_t, best_mask, True
