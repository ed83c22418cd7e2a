"""Synthetic scene generation and patch rasterization.

Scenes are procedural: the rendered "image" is a continuous function of
image coordinates (striped cone silhouette over a textured ground and a
sky gradient), so a patch can be rasterized directly for any bounding
box window without ever materializing the full frame.  Re-cropping from
a perturbed box therefore samples the same underlying scene, exactly as
a detector jitter study requires.

Rendered pixel values are quantized to the 8-bit grid at render time, so
a dataset written as PNG and re-loaded reproduces the in-memory patches
bit-exactly.

The ego-vehicle frame has x forward, y left, z up; cones stand on the
ground plane z=0.  Each cone's keypoint plane is oriented to face the
camera horizontally (billboard about the vertical axis), encoding the
view-dependent silhouette as a fixed planar model.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._accel import jit_kernel
from .cone import COLOR_CLASSES, ConeModel
from .errors import DegenerateBox
from .geometry import CameraIntrinsics, RigidTransform, default_intrinsics, project
from .loss import PATCH_SIZE, KeypointSet, PatchToImage
from .regressor import Patch
from .seeding import derive_seed, substream

# Fraction of each bbox dimension added as margin around the projected
# keypoints, imitating detector looseness.
BBOX_MARGIN = 0.10
# Cones whose box overlaps the image by less than this fraction are skipped.
MIN_VISIBLE_FRACTION = 0.25
MIN_BOX_SIDE = 8.0

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_VERSION = 1

# Flat band colors (body, stripe) per color class, linear RGB in [0, 1].
_BAND_COLORS = {
    "blue": ((0.07, 0.16, 0.55), (0.92, 0.92, 0.94)),
    "yellow": ((0.85, 0.78, 0.10), (0.06, 0.06, 0.06)),
    "orange": ((0.93, 0.35, 0.05), (0.92, 0.92, 0.94)),
}


@dataclass(frozen=True)
class ConePlacement:
    """Ground-truth cone base position (ego frame, meters) and color."""

    position: np.ndarray
    color_class: str

    def __post_init__(self):
        p = np.array(self.position, dtype=np.float64).reshape(3)
        p.flags.writeable = False
        object.__setattr__(self, "position", p)
        if self.color_class not in COLOR_CLASSES:
            raise ValueError(f"unknown color class {self.color_class!r}")


def default_camera_extrinsic(camera_height: float = 0.8) -> RigidTransform:
    """Ego-to-camera transform for a forward camera mounted at the given
    height: ego x (forward) -> camera z, ego y (left) -> -x, ego z -> -y."""
    R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return RigidTransform(R, -R @ np.array([0.0, 0.0, camera_height]))


@dataclass(frozen=True)
class SceneSpec:
    """Cone placements, camera pose and seed for one synthetic experiment."""

    cones: tuple
    camera_extrinsic: RigidTransform
    intrinsics: CameraIntrinsics
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "cones", tuple(self.cones))
        positions = np.array([c.position for c in self.cones]).reshape(-1, 3)
        if len(positions):
            depths = (positions @ self.camera_extrinsic.rotation.T + self.camera_extrinsic.translation)[:, 2]
            if np.any(depths <= 0) or np.any(depths > 50.0):
                raise ValueError("cone depths must lie in (0, 50] m in the camera frame")
            if len(positions) > 1:
                diff = positions[:, None, :] - positions[None, :, :]
                dist = np.sqrt((diff**2).sum(-1))
                np.fill_diagonal(dist, np.inf)
                if dist.min() < 0.5:
                    raise ValueError("cones must be at least 0.5 m apart")

    def cone_depth(self, index: int) -> float:
        """Camera-frame depth of a cone's base."""
        return float(self.camera_extrinsic.apply(self.cones[index].position)[2])


def default_scene(
    n_cones: int,
    depth_min: float = 4.0,
    depth_max: float = 18.0,
    seed: int = 0,
    intrinsics: CameraIntrinsics = None,
    camera_height: float = 0.8,
) -> SceneSpec:
    """Random track-like arrangement: cones on the ground at depths in
    [depth_min, depth_max], laterally inside the camera's view."""
    intrinsics = intrinsics or default_intrinsics()
    rng = substream(seed, "scene")
    half_fov = np.arctan(intrinsics.cx / intrinsics.fx)
    placements = []
    positions = []
    attempts = 0
    while len(placements) < n_cones:
        attempts += 1
        if attempts > 1000 * max(n_cones, 1):
            raise ValueError("could not place cones with 0.5 m separation")
        d = rng.uniform(depth_min, depth_max)
        phi = rng.uniform(-0.7, 0.7) * half_fov
        pos = np.array([d, d * np.tan(phi), 0.0])
        if positions and np.min(np.linalg.norm(np.array(positions) - pos, axis=1)) < 0.5:
            continue
        color = COLOR_CLASSES[int(rng.choice(3, p=[0.45, 0.45, 0.1]))]
        placements.append(ConePlacement(pos, color))
        positions.append(pos)
    return SceneSpec(
        cones=tuple(placements),
        camera_extrinsic=default_camera_extrinsic(camera_height),
        intrinsics=intrinsics,
        seed=seed,
    )


def billboard_pose(position_ego: np.ndarray, extrinsic: RigidTransform) -> RigidTransform:
    """Ground-truth pose of a cone's frame F_w in the camera frame: z up,
    keypoint plane facing the camera horizontally."""
    cam_center = extrinsic.inverse().translation
    view = np.asarray(position_ego, dtype=np.float64) - cam_center
    horiz = np.array([view[0], view[1], 0.0])
    norm = np.linalg.norm(horiz)
    y_w = horiz / norm if norm > 1e-9 else np.array([1.0, 0.0, 0.0])
    z_w = np.array([0.0, 0.0, 1.0])
    x_w = np.cross(y_w, z_w)
    R_ego_w = np.column_stack([x_w, y_w, z_w])
    return extrinsic.compose(RigidTransform(R_ego_w, position_ego))


@dataclass(frozen=True)
class RenderedCone:
    """One generated training/eval example."""

    bbox: np.ndarray
    patch: Patch
    truth_keypoints: KeypointSet
    truth_position: np.ndarray
    color_class: str
    cone_index: int

    def __post_init__(self):
        b = np.array(self.bbox, dtype=np.float64).reshape(4)
        p = np.array(self.truth_position, dtype=np.float64).reshape(3)
        b.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "bbox", b)
        object.__setattr__(self, "truth_position", p)

    def sample(self) -> tuple:
        """(Patch, KeypointSet) pair for training."""
        return self.patch, self.truth_keypoints


@dataclass(frozen=True)
class BBoxPerturbation:
    """Independent uniform edge displacement proportional to box size."""

    magnitude: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.magnitude <= 0.5:
            raise ValueError("perturbation magnitude must lie in [0, 0.5]")


def keypoint_bbox(image_points: np.ndarray, margin: float = BBOX_MARGIN) -> np.ndarray:
    """Tight box around projected keypoints, expanded by ``margin`` of
    each dimension (split between both sides)."""
    x0, y0 = image_points.min(axis=0)
    x1, y1 = image_points.max(axis=0)
    mx = (x1 - x0) * margin / 2.0
    my = (y1 - y0) * margin / 2.0
    return np.array([x0 - mx, y0 - my, x1 + mx, y1 + my])


def perturb_bbox(bbox, p: BBoxPerturbation, width: int, height: int) -> np.ndarray:
    """Displace each edge by a uniform draw within +-magnitude times the
    box dimension, clamped to the image; deterministic given p.seed."""
    x0, y0, x1, y1 = (float(v) for v in bbox)
    w = x1 - x0
    h = y1 - y0
    rng = np.random.Generator(np.random.PCG64(p.seed))
    m = p.magnitude
    x0 = min(max(x0 + rng.uniform(-m * w, m * w), 0.0), float(width))
    x1 = min(max(x1 + rng.uniform(-m * w, m * w), 0.0), float(width))
    y0 = min(max(y0 + rng.uniform(-m * h, m * h), 0.0), float(height))
    y1 = min(max(y1 + rng.uniform(-m * h, m * h), 0.0), float(height))
    if (x1 - x0) < MIN_BOX_SIDE or (y1 - y0) < MIN_BOX_SIDE:
        raise DegenerateBox(f"perturbed box {x1 - x0:.1f}x{y1 - y0:.1f} px is below 8 px")
    return np.array([x0, y0, x1, y1])


def render_window(
    spec: SceneSpec, image_keypoints: np.ndarray, color_class: str, bbox
) -> Patch:
    """Rasterize the 80x80 patch of one cone for an arbitrary bbox window."""
    p2i = PatchToImage.from_bbox(bbox)
    body, stripe = _BAND_COLORS[color_class]
    pixels = _render_patch(
        p2i.sx,
        p2i.sy,
        p2i.tx,
        p2i.ty,
        np.ascontiguousarray(image_keypoints, dtype=np.float64),
        np.array(body),
        np.array(stripe),
        float(spec.intrinsics.width),
        float(spec.intrinsics.height),
        float(spec.intrinsics.cy),
        derive_seed(spec.seed, "render") % (2**31),
    )
    return Patch(pixels=pixels, patch_to_image=p2i)


def generate_scene(spec: SceneSpec, model: ConeModel) -> tuple:
    """Render every visible cone; returns (cones, skipped_count).

    Ground-truth patch keypoints are the exact pinhole projections of
    the model points mapped through the box's affine, so their arms keep
    the model's cross-ratio to projection round-off.
    """
    W, H = spec.intrinsics.width, spec.intrinsics.height
    rendered = []
    skipped = 0
    for i, placement in enumerate(spec.cones):
        pose = billboard_pose(placement.position, spec.camera_extrinsic)
        cam_pts = pose.apply(model.keypoints3d)
        if np.any(cam_pts[:, 2] <= 1e-6):
            skipped += 1
            continue
        image_kps = project(spec.intrinsics, pose, model.keypoints3d)
        bbox = keypoint_bbox(image_kps)
        ix0 = max(bbox[0], 0.0)
        iy0 = max(bbox[1], 0.0)
        ix1 = min(bbox[2], float(W))
        iy1 = min(bbox[3], float(H))
        area = (bbox[2] - bbox[0]) * (bbox[3] - bbox[1])
        visible = max(ix1 - ix0, 0.0) * max(iy1 - iy0, 0.0)
        if area <= 0 or visible / area < MIN_VISIBLE_FRACTION:
            skipped += 1
            continue
        color = placement.color_class if placement.color_class else model.color_class
        patch = render_window(spec, image_kps, color, bbox)
        truth = KeypointSet(
            points=patch.patch_to_image.invert(image_kps),
            patch_to_image=patch.patch_to_image,
        )
        rendered.append(
            RenderedCone(
                bbox=bbox,
                patch=patch,
                truth_keypoints=truth,
                truth_position=placement.position,
                color_class=color,
                cone_index=i,
            )
        )
    return rendered, skipped


# ---------------------------------------------------------------------------
# Dataset I/O.


def write_dataset(cones, out_dir, spec: SceneSpec = None) -> Path:
    """Write patches as 8-bit RGB PNGs plus a line-delimited manifest.

    Record order and float formatting are deterministic; re-loading and
    re-writing reproduces the files byte for byte.
    """
    out_dir = Path(out_dir)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8") as fh:
        meta = {"record": "meta", "version": MANIFEST_VERSION, "count": len(cones)}
        if spec is not None:
            meta["intrinsics"] = {
                "fx": spec.intrinsics.fx,
                "fy": spec.intrinsics.fy,
                "cx": spec.intrinsics.cx,
                "cy": spec.intrinsics.cy,
                "width": spec.intrinsics.width,
                "height": spec.intrinsics.height,
            }
            meta["camera_extrinsic"] = {
                "rotation": spec.camera_extrinsic.rotation.tolist(),
                "translation": spec.camera_extrinsic.translation.tolist(),
            }
            meta["seed"] = spec.seed
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for n, cone in enumerate(cones):
            rel = f"patches/cone_{n:05d}.png"
            img = Image.fromarray(
                np.round(cone.patch.pixels * 255.0).astype(np.uint8), mode="RGB"
            )
            img.save(out_dir / rel)
            p2i = cone.patch.patch_to_image
            record = {
                "record": "cone",
                "index": cone.cone_index,
                "patch": rel,
                "color": cone.color_class,
                "bbox": cone.bbox.tolist(),
                "keypoints_patch": cone.truth_keypoints.points.reshape(14).tolist(),
                "patch_to_image": [p2i.sx, p2i.sy, p2i.tx, p2i.ty],
                "position_ego": cone.truth_position.tolist(),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(data_dir) -> tuple:
    """Load a written dataset; returns (cones, meta_dict)."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST_NAME
    cones = []
    meta = {}
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec["record"] == "meta":
                meta = rec
                continue
            pixels = (
                np.asarray(Image.open(data_dir / rec["patch"]).convert("RGB"), dtype=np.float64)
                / 255.0
            )
            p2i = PatchToImage(*rec["patch_to_image"])
            patch = Patch(pixels=pixels, patch_to_image=p2i)
            truth = KeypointSet(
                points=np.array(rec["keypoints_patch"]).reshape(7, 2), patch_to_image=p2i
            )
            cones.append(
                RenderedCone(
                    bbox=np.array(rec["bbox"]),
                    patch=patch,
                    truth_keypoints=truth,
                    truth_position=np.array(rec["position_ego"]),
                    color_class=rec["color"],
                    cone_index=int(rec["index"]),
                )
            )
    return cones, meta


def scene_from_meta(meta: dict) -> tuple:
    """Reconstruct (intrinsics, extrinsic, seed) from a manifest meta record."""
    k = meta["intrinsics"]
    intr = CameraIntrinsics(
        fx=k["fx"], fy=k["fy"], cx=k["cx"], cy=k["cy"], width=int(k["width"]), height=int(k["height"])
    )
    e = meta["camera_extrinsic"]
    extr = RigidTransform(np.array(e["rotation"]), np.array(e["translation"]))
    return intr, extr, int(meta.get("seed", 0))


def save_scene_spec(spec: SceneSpec, path) -> None:
    """Human-readable scene config (positions in meters, ego frame)."""
    doc = {
        "seed": spec.seed,
        "intrinsics": {
            "fx": spec.intrinsics.fx,
            "fy": spec.intrinsics.fy,
            "cx": spec.intrinsics.cx,
            "cy": spec.intrinsics.cy,
            "width": spec.intrinsics.width,
            "height": spec.intrinsics.height,
        },
        "camera_extrinsic": {
            "rotation": spec.camera_extrinsic.rotation.tolist(),
            "translation": spec.camera_extrinsic.translation.tolist(),
        },
        "cones": [
            {"position": c.position.tolist(), "color": c.color_class} for c in spec.cones
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_scene_spec(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    k = doc["intrinsics"]
    e = doc["camera_extrinsic"]
    return SceneSpec(
        cones=tuple(
            ConePlacement(np.array(c["position"]), c["color"]) for c in doc["cones"]
        ),
        camera_extrinsic=RigidTransform(np.array(e["rotation"]), np.array(e["translation"])),
        intrinsics=CameraIntrinsics(
            fx=k["fx"], fy=k["fy"], cx=k["cx"], cy=k["cy"], width=int(k["width"]), height=int(k["height"])
        ),
        seed=int(doc["seed"]),
    )


# ---------------------------------------------------------------------------
# Rasterization kernels (numba-compiled unless MONOCONE_NUMBA=0).


@jit_kernel
def _hash01(ix, iy, seed):
    """Deterministic integer-lattice hash to [0, 1]."""
    h = (ix * 374761393 + iy * 668265263 + seed * 2246822519) & 0xFFFFFFFF
    h = ((h ^ (h >> 13)) * 1274126177) & 0xFFFFFFFF
    h = h ^ (h >> 16)
    return h / 4294967295.0


@jit_kernel
def _value_noise(u, v, scale, seed):
    """Smoothly interpolated lattice noise in [0, 1]."""
    gx = u / scale
    gy = v / scale
    ix = int(np.floor(gx))
    iy = int(np.floor(gy))
    fx = gx - ix
    fy = gy - iy
    sx = fx * fx * (3.0 - 2.0 * fx)
    sy = fy * fy * (3.0 - 2.0 * fy)
    v00 = _hash01(ix, iy, seed)
    v10 = _hash01(ix + 1, iy, seed)
    v01 = _hash01(ix, iy + 1, seed)
    v11 = _hash01(ix + 1, iy + 1, seed)
    return (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy


@jit_kernel
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@jit_kernel
def _render_patch(sx, sy, tx, ty, kps, body, stripe, img_w, img_h, horizon_v, seed):
    """Rasterize one 80x80 patch of the procedural scene.

    Pixel (row i, col j) samples the scene at the image point mapped
    from the patch-pixel center; points outside the image are black
    (border truncation).  Output values are quantized to the 8-bit grid.
    """
    out = np.zeros((80, 80, 3))
    # Cone silhouette: triangle apex (kp 1) to base corners (kps 4, 7),
    # banded by the stripe-boundary lines (kps 2-5 and 3-6).
    ax, ay = kps[0, 0], kps[0, 1]
    lx, ly = kps[3, 0], kps[3, 1]
    rx, ry = kps[6, 0], kps[6, 1]
    orient = _edge(ax, ay, lx, ly, rx, ry)
    if orient == 0.0:
        orient = 1.0
    up_side = _edge(kps[1, 0], kps[1, 1], kps[4, 0], kps[4, 1], ax, ay)
    lo_side = _edge(kps[2, 0], kps[2, 1], kps[5, 0], kps[5, 1], ax, ay)
    for i in range(80):
        for j in range(80):
            u = tx + sx * (j + 0.5)
            v = ty + sy * (i + 0.5)
            if u < 0.0 or u >= img_w or v < 0.0 or v >= img_h:
                continue  # outside the sensor: stays black
            e1 = _edge(ax, ay, lx, ly, u, v) * orient
            e2 = _edge(lx, ly, rx, ry, u, v) * orient
            e3 = _edge(rx, ry, ax, ay, u, v) * orient
            r = 0.0
            g = 0.0
            b = 0.0
            if e1 >= 0.0 and e2 >= 0.0 and e3 >= 0.0:
                s_up = _edge(kps[1, 0], kps[1, 1], kps[4, 0], kps[4, 1], u, v)
                s_lo = _edge(kps[2, 0], kps[2, 1], kps[5, 0], kps[5, 1], u, v)
                if s_up * up_side >= 0.0:
                    r, g, b = body[0], body[1], body[2]
                elif s_lo * lo_side >= 0.0:
                    r, g, b = stripe[0], stripe[1], stripe[2]
                else:
                    r, g, b = body[0], body[1], body[2]
            elif v < horizon_v:
                # Sky: light gradient toward the horizon.
                f = v / max(horizon_v, 1.0)
                s = 0.78 - 0.16 * f
                r, g, b = s, s + 0.01, s + 0.03
            else:
                # Ground: mid-gray asphalt with smooth lattice noise.
                n1 = _value_noise(u, v, 23.0, seed)
                n2 = _value_noise(u, v, 5.0, seed + 17)
                s = 0.26 + 0.12 * n1 + 0.05 * n2
                r, g, b = s, s, s
            jitter = (_hash01(int(np.floor(u)), int(np.floor(v)), seed + 101) - 0.5) * 0.04
            r += jitter
            g += jitter
            b += jitter
            out[i, j, 0] = np.floor(min(max(r, 0.0), 1.0) * 255.0 + 0.5) / 255.0
            out[i, j, 1] = np.floor(min(max(g, 0.0), 1.0) * 255.0 + 0.5) / 255.0
            out[i, j, 2] = np.floor(min(max(b, 0.0), 1.0) * 255.0 + 0.5) / 255.0
    return out
