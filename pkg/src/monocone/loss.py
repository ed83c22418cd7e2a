"""Keypoint training objective: squared error plus cross-ratio regularizers.

Per patch the loss is

    sum_i ||pred_i - truth_i||^2
    + gamma * (Cr(left arm of pred) - cr3d)^2
    + gamma * (Cr(right arm of pred) - cr3d)^2

computed in patch coordinates on the predicted points only.  Batches are
reduced by the mean of per-patch losses.
"""

from dataclasses import dataclass

import numpy as np

from .cone import ARM_LEFT, ARM_RIGHT, CR_3D
from .errors import DegenerateConfiguration
from .geometry import cross_ratio_batch, cross_ratio_gradient_batch

PATCH_SIZE = 80


@dataclass(frozen=True)
class PatchToImage:
    """Axis-aligned affine map from patch pixels to full-image pixels."""

    sx: float
    sy: float
    tx: float
    ty: float

    def __post_init__(self):
        if not (self.sx > 0 and self.sy > 0):
            raise ValueError("patch-to-image scale factors must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.stack([p[..., 0] * self.sx + self.tx, p[..., 1] * self.sy + self.ty], axis=-1)

    def invert(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.stack([(p[..., 0] - self.tx) / self.sx, (p[..., 1] - self.ty) / self.sy], axis=-1)

    @staticmethod
    def identity() -> "PatchToImage":
        return PatchToImage(1.0, 1.0, 0.0, 0.0)

    @staticmethod
    def from_bbox(bbox) -> "PatchToImage":
        x0, y0, x1, y1 = (float(v) for v in bbox)
        return PatchToImage((x1 - x0) / PATCH_SIZE, (y1 - y0) / PATCH_SIZE, x0, y0)


@dataclass(frozen=True)
class KeypointSet:
    """Seven ordered 2D points in patch coordinates plus the patch placement."""

    points: np.ndarray
    patch_to_image: PatchToImage

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(7, 2)
        if not np.all(np.isfinite(pts)):
            raise ValueError("keypoints must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def image_points(self) -> np.ndarray:
        return self.patch_to_image.apply(self.points)

    def flat(self) -> np.ndarray:
        """Points as the regressor's 14-vector (x1, y1, ..., x7, y7)."""
        return self.points.reshape(14).copy()


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1e-4
    cr3d: float = CR_3D

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def _arms(points: np.ndarray) -> np.ndarray:
    """Stack left/right arm 4-tuples: (..., 7, 2) -> (..., 2, 4, 2)."""
    return np.stack(
        [points[..., list(ARM_LEFT), :], points[..., list(ARM_RIGHT), :]], axis=-3
    )


def loss_batch(pred: np.ndarray, truth: np.ndarray, cfg: LossConfig):
    """Per-patch losses for batches (B, 7, 2).

    Returns ``(losses, skipped)`` where ``skipped`` counts arm terms
    dropped because the predicted arm was degenerate (the squared-error
    term is always kept).
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    se = np.sum((pred - truth) ** 2, axis=(-2, -1))
    if cfg.gamma == 0.0:
        return se, 0
    cr, valid = cross_ratio_batch(_arms(pred))
    dev = np.where(valid, cr - cfg.cr3d, 0.0)
    reg = cfg.gamma * np.sum(dev**2, axis=-1)
    return se + reg, int(np.size(valid) - np.count_nonzero(valid))


def loss_gradient_batch(pred: np.ndarray, truth: np.ndarray, cfg: LossConfig):
    """Per-patch losses and gradients d loss / d pred for batches (B, 7, 2).

    Degenerate predicted arms contribute neither loss nor gradient
    (skipped and counted), which avoids exploding gradients early in
    training when predictions can collapse onto a point.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    losses, skipped = loss_batch(pred, truth, cfg)
    grad = 2.0 * (pred - truth)
    if cfg.gamma != 0.0:
        arms = _arms(pred)
        cr, arm_grad = cross_ratio_gradient_batch(arms)
        _, valid = cross_ratio_batch(arms)
        dev = np.where(valid, cr - cfg.cr3d, 0.0)
        coef = 2.0 * cfg.gamma * dev
        term = np.where(valid[..., None, None], coef[..., None, None] * arm_grad, 0.0)
        for arm_axis, arm in enumerate((ARM_LEFT, ARM_RIGHT)):
            for slot, row in enumerate(arm):
                grad[..., row, :] += term[..., arm_axis, slot, :]
    return losses, grad, skipped


def keypoint_loss(pred: KeypointSet, truth: KeypointSet, cfg: LossConfig) -> float:
    """Eq-style scalar loss for a single patch (see module docstring).

    Raises DegenerateConfiguration if a predicted arm is degenerate and
    gamma > 0; the batched training path skips such samples instead.
    """
    _check_arms(pred, cfg)
    losses, _ = loss_batch(pred.points[None], truth.points[None], cfg)
    return float(losses[0])


def keypoint_loss_gradient(pred: KeypointSet, truth: KeypointSet, cfg: LossConfig) -> np.ndarray:
    """Analytic d loss / d (x1, y1, ..., x7, y7) as a 14-vector."""
    _check_arms(pred, cfg)
    _, grad, _ = loss_gradient_batch(pred.points[None], truth.points[None], cfg)
    return grad[0].reshape(14)


def _check_arms(pred: KeypointSet, cfg: LossConfig) -> None:
    if cfg.gamma == 0.0:
        return
    _, valid = cross_ratio_batch(_arms(pred.points))
    if not np.all(valid):
        raise DegenerateConfiguration("predicted arm is degenerate")
