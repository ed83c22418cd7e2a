"""Keypoint providers: noisy ground-truth oracle and a desk-scale
trainable regressor.

The regressor keeps the interface of the full-scale network -- an
80x80x3 patch in, a 14-vector of patch coordinates out -- but replaces
the convolutional backbone with a small fully-connected network on a
20x20 grayscale downsample, so the loss, its gradients, and the training
scheme can be exercised end to end on a desk.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from ._accel import jit_kernel
from .cone import CR_3D
from .errors import EmptyDataset
from .loss import PATCH_SIZE, KeypointSet, LossConfig, PatchToImage, loss_batch, loss_gradient_batch
from .seeding import substream

GRID = 20  # downsampled feature grid (20x20 grayscale -> 400 inputs)
HIDDEN1 = 128
HIDDEN2 = 64
OUTPUTS = 14
PATCH_CENTER = PATCH_SIZE / 2.0

_LUMA = np.array([0.299, 0.587, 0.114])

CHECKPOINT_MAGIC = b"MCCKPT01"  # 8-byte header; payload is little-endian
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Patch:
    """80x80x3 float image in [0, 1] plus its placement in the full image."""

    pixels: np.ndarray
    patch_to_image: PatchToImage

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.shape != (PATCH_SIZE, PATCH_SIZE, 3):
            raise ValueError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}x3, got {px.shape}")
        np.clip(px, 0.0, 1.0, out=px)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)


@dataclass
class RegressorModel:
    """Fully-connected 400 -> 128 -> 64 -> 14 network with ReLU activations."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @classmethod
    def initialize(cls, seed) -> "RegressorModel":
        """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

        The output bias starts at the patch center so an untrained model
        predicts the middle of the patch rather than its corner.
        """
        rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "init")
        dims = (GRID * GRID, HIDDEN1, HIDDEN2, OUTPUTS)
        params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            params.append(rng.uniform(-bound, bound, size=fan_out))
        params[-1] = np.full(OUTPUTS, PATCH_CENTER)
        return cls(*params)

    def arrays(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2, "w3": self.w3, "b3": self.b3}

    def copy(self) -> "RegressorModel":
        return RegressorModel(**{k: v.copy() for k, v in self.arrays().items()})


def features(pixels: np.ndarray) -> np.ndarray:
    """Patch pixels (..., 80, 80, 3) -> flattened 20x20 grayscale (..., 400)."""
    px = np.asarray(pixels, dtype=np.float64)
    gray = px @ _LUMA
    k = PATCH_SIZE // GRID
    blocks = gray.reshape(gray.shape[:-2] + (GRID, k, GRID, k))
    return blocks.mean(axis=(-3, -1)).reshape(gray.shape[:-2] + (GRID * GRID,))


def _forward(model: RegressorModel, X: np.ndarray):
    z1 = X @ model.w1 + model.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ model.w2 + model.b2
    a2 = np.maximum(z2, 0.0)
    out = a2 @ model.w3 + model.b3
    return out, (X, z1, a1, z2, a2)


def _backward(model: RegressorModel, cache, dout: np.ndarray) -> dict:
    X, z1, a1, z2, a2 = cache
    dw3 = a2.T @ dout
    db3 = dout.sum(axis=0)
    dz2 = (dout @ model.w3.T) * (z2 > 0.0)
    dw2 = a1.T @ dz2
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ model.w2.T) * (z1 > 0.0)
    dw1 = X.T @ dz1
    db1 = dz1.sum(axis=0)
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "w3": dw3, "b3": db3}


def predict(model: RegressorModel, patch: Patch) -> KeypointSet:
    """Regress the 7 keypoints of a patch (patch coordinates; values may
    fall outside the patch for truncated cones)."""
    out, _ = _forward(model, features(patch.pixels)[None])
    return KeypointSet(points=out[0].reshape(7, 2), patch_to_image=patch.patch_to_image)


def predict_batch(model: RegressorModel, pixels: np.ndarray) -> np.ndarray:
    """Batched raw prediction: (B, 80, 80, 3) -> (B, 7, 2)."""
    out, _ = _forward(model, features(pixels))
    return out.reshape(-1, 7, 2)


def oracle_keypoints(truth: KeypointSet, sigma: float, seed) -> KeypointSet:
    """Ground-truth keypoints with iid Gaussian patch-pixel noise.

    Isolates the geometric pipeline from learned-model quality.
    Deterministic given the seed.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    noisy = truth.points + rng.normal(0.0, sigma, size=(7, 2)) if sigma > 0 else truth.points
    return KeypointSet(points=noisy, patch_to_image=truth.patch_to_image)


@dataclass(frozen=True)
class TrainConfig:
    """SGD-with-momentum schedule; defaults follow the full-scale recipe
    (lr 1e-4, momentum 0.9, batch 128, x0.1 decay after epochs 75 and
    100, 250 epochs) and are overridden for desk runs."""

    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 250
    lr_decay_epochs: tuple = (75, 100)
    lr_decay_factor: float = 0.1
    gamma: float = 1e-4
    cr3d: float = CR_3D
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        object.__setattr__(self, "lr_decay_epochs", tuple(self.lr_decay_epochs))


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    learning_rate: float
    degenerate_arms: int


def _stack_samples(samples):
    X = features(np.stack([p.pixels for p, _ in samples]))
    Y = np.stack([k.points for _, k in samples])
    return X, Y


def train(samples, cfg: TrainConfig):
    """Train the regressor; returns (model, per-epoch stats).

    Mini-batch SGD with momentum (velocity v <- mu v + g, p <- p - lr v)
    on the mean per-patch loss.  Bit-deterministic for a fixed config and
    seed: initialization, shuffling, and summation order are all fixed.
    """
    samples = list(samples)
    if not samples:
        raise EmptyDataset("no training samples")
    X, Y = _stack_samples(samples)
    n = len(samples)
    loss_cfg = LossConfig(gamma=cfg.gamma, cr3d=cfg.cr3d)
    model = RegressorModel.initialize(substream(cfg.seed, "train", "init"))
    shuffle_rng = substream(cfg.seed, "train", "shuffle")
    velocity = {k: np.zeros_like(v) for k, v in model.arrays().items()}
    history = []
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        if epoch in cfg.lr_decay_epochs:
            lr *= cfg.lr_decay_factor
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        degenerate = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out, cache = _forward(model, X[idx])
            pred = out.reshape(-1, 7, 2)
            losses, grad, skipped = loss_gradient_batch(pred, Y[idx], loss_cfg)
            loss_sum += float(losses.sum())
            degenerate += skipped
            dout = grad.reshape(-1, OUTPUTS) / len(idx)
            grads = _backward(model, cache, dout)
            params = model.arrays()
            for name, g in grads.items():
                velocity[name] = cfg.momentum * velocity[name] + g
                params[name] -= lr * velocity[name]
        history.append(EpochStats(epoch, loss_sum / n, lr, degenerate))
    return model, history


def evaluate_loss(model: RegressorModel, samples, cfg: LossConfig = None) -> float:
    """Mean per-patch loss of the model on a sample set."""
    cfg = cfg or LossConfig()
    X, Y = _stack_samples(list(samples))
    out, _ = _forward(model, X)
    losses, _ = loss_batch(out.reshape(-1, 7, 2), Y, cfg)
    return float(losses.mean())


# ---------------------------------------------------------------------------
# Data augmentation.


@dataclass(frozen=True)
class AugmentParams:
    """One sampled augmentation: geometric map about the patch center
    plus photometric jitter (which never moves labels)."""

    rotation_deg: float
    scale: float
    translation: tuple
    contrast: float = 1.0
    saturation: float = 1.0
    brightness: float = 0.0

    @staticmethod
    def identity() -> "AugmentParams":
        return AugmentParams(0.0, 1.0, (0.0, 0.0))

    def matrix(self) -> np.ndarray:
        """Forward affine [A | b] (2, 3) on patch coordinates."""
        th = np.deg2rad(self.rotation_deg)
        A = self.scale * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        center = np.array([PATCH_CENTER, PATCH_CENTER])
        b = center - A @ center + np.asarray(self.translation, dtype=np.float64)
        return np.hstack([A, b[:, None]])


def sample_augmentation(rng: np.random.Generator) -> AugmentParams:
    """Random rotation in [-15, +15] degrees, scale in [0.8, 1.5x],
    translation up to 50% of the edge length, plus contrast/saturation/
    brightness jitter."""
    return AugmentParams(
        rotation_deg=float(rng.uniform(-15.0, 15.0)),
        scale=float(rng.uniform(0.8, 1.5)),
        translation=(
            float(rng.uniform(-0.5, 0.5) * PATCH_SIZE),
            float(rng.uniform(-0.5, 0.5) * PATCH_SIZE),
        ),
        contrast=float(rng.uniform(0.8, 1.2)),
        saturation=float(rng.uniform(0.8, 1.2)),
        brightness=float(rng.uniform(-0.1, 0.1)),
    )


def apply_augmentation(patch: Patch, truth: KeypointSet, params: AugmentParams):
    """Apply one augmentation to pixels and labels consistently.

    Pixels are inverse-warped with bilinear sampling (black outside);
    keypoints get the identical forward affine.  The nominal
    patch_to_image is carried through unchanged (augmented samples no
    longer correspond to a real image crop).
    """
    m = params.matrix()
    A, b = m[:, :2], m[:, 2]
    inv_A = np.linalg.inv(A)
    inv_b = -inv_A @ b
    warped = _warp_bilinear(np.ascontiguousarray(patch.pixels), inv_A, inv_b)
    warped = _photometric(warped, params)
    new_points = truth.points @ A.T + b
    return (
        Patch(pixels=warped, patch_to_image=patch.patch_to_image),
        KeypointSet(points=new_points, patch_to_image=truth.patch_to_image),
    )


def augment(patch: Patch, truth: KeypointSet, seed):
    """Randomly augment one sample (see sample_augmentation)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    return apply_augmentation(patch, truth, sample_augmentation(rng))


def build_training_set(samples, augment_factor: int, seed):
    """Originals plus ``augment_factor`` augmented copies of each sample."""
    rng = substream(seed, "augment")
    out = list(samples)
    for patch, truth in samples:
        for _ in range(augment_factor):
            out.append(augment(patch, truth, rng))
    return out


def _photometric(pixels: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = pixels
    if params.saturation != 1.0:
        gray = (out @ _LUMA)[..., None]
        out = gray + params.saturation * (out - gray)
    if params.contrast != 1.0:
        out = 0.5 + params.contrast * (out - 0.5)
    if params.brightness != 0.0:
        out = out + params.brightness
    return np.clip(out, 0.0, 1.0)


@jit_kernel
def _warp_bilinear(src, inv_A, inv_b):
    """Inverse-warp an (80, 80, 3) patch by an affine map on continuous
    patch coordinates; samples outside the source are black."""
    h, w, _ = src.shape
    out = np.zeros_like(src)
    for i in range(h):
        for j in range(w):
            xo = j + 0.5
            yo = i + 0.5
            xs = inv_A[0, 0] * xo + inv_A[0, 1] * yo + inv_b[0]
            ys = inv_A[1, 0] * xo + inv_A[1, 1] * yo + inv_b[1]
            tx = xs - 0.5
            ty = ys - 0.5
            x0 = int(np.floor(tx))
            y0 = int(np.floor(ty))
            fx = tx - x0
            fy = ty - y0
            for c in range(3):
                acc = 0.0
                for dy in range(2):
                    yy = y0 + dy
                    if yy < 0 or yy >= h:
                        continue
                    wy = 1.0 - fy if dy == 0 else fy
                    for dx in range(2):
                        xx = x0 + dx
                        if xx < 0 or xx >= w:
                            continue
                        wx = 1.0 - fx if dx == 0 else fx
                        acc += wy * wx * src[yy, xx, c]
                out[i, j, c] = acc
    return out


# ---------------------------------------------------------------------------
# Checkpoint I/O: 8-byte magic, explicit little-endian layout.


def save_checkpoint(model: RegressorModel, path) -> None:
    arrays = model.arrays()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("ascii")
            fh.write(struct.pack("<B", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> RegressorModel:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a monocone checkpoint (magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<B", fh.read(1))
            name = fh.read(name_len).decode("ascii")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n_items), dtype="<f8").reshape(shape)
            arrays[name] = data.astype(np.float64)
    expected = {"w1", "b1", "w2", "b2", "w3", "b3"}
    if set(arrays) != expected:
        raise ValueError(f"checkpoint arrays {sorted(arrays)} do not match {sorted(expected)}")
    return RegressorModel(**arrays)
