"""Scene data model: camera poses, images, synthetic ground truth, dataset I/O.

Conventions used throughout the package: right-handed world coordinates,
OpenGL-style cameras (+x right, +y up, the camera looks down -z),
world-from-camera pose matrices, and pixel channels stored in [0, 1] with
8-bit quantization happening only at file I/O.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, NamedTuple, Sequence

import numpy as np
from PIL import Image

ORTHONORMAL_TOL = 1e-9
REPAIR_TOL = 1e-6

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
GOLDEN_FRAC = (math.sqrt(5.0) - 1.0) / 2.0


class DatasetError(ValueError):
    """Malformed dataset, manifest or ground-truth description."""


def _freeze(x, shape, name):
    arr = np.array(x, dtype=np.float64)
    if arr.shape != shape:
        raise DatasetError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


def orthonormalize(rot):
    """Project a near-rotation 3x3 matrix onto SO(3) (polar decomposition)."""
    u, _, vt = np.linalg.svd(np.asarray(rot, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] *= -1.0
        r = u @ vt
    return r


@dataclass(frozen=True, eq=False)
class Cube:
    """Axis-aligned cube given by its min corner and edge length (world units)."""

    min_corner: np.ndarray
    edge: float

    def __post_init__(self):
        object.__setattr__(self, "min_corner", _freeze(self.min_corner, (3,), "min_corner"))
        object.__setattr__(self, "edge", float(self.edge))
        if not (math.isfinite(self.edge) and self.edge > 0):
            raise DatasetError("cube edge must be positive and finite")

    def __eq__(self, other):
        if not isinstance(other, Cube):
            return NotImplemented
        return self.edge == other.edge and bool(np.all(self.min_corner == other.min_corner))

    @property
    def max_corner(self):
        return self.min_corner + self.edge

    @property
    def center(self):
        return self.min_corner + 0.5 * self.edge

    def contains(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return np.all((pts >= self.min_corner) & (pts <= self.max_corner), axis=-1)

    def lattice(self, res: int):
        """Node-aligned sample positions, boundary inclusive: (res, res, res, 3)."""
        if res < 2:
            raise DatasetError("lattice needs res >= 2")
        axes = [self.min_corner[a] + (np.arange(res) / (res - 1)) * self.edge for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-from-camera rigid transform plus pinhole intrinsics."""

    rotation: np.ndarray      # (3, 3) orthonormal, det +1
    translation: np.ndarray   # (3,) camera center in world units
    focal_px: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", _freeze(self.rotation, (3, 3), "rotation"))
        object.__setattr__(self, "translation", _freeze(self.translation, (3,), "translation"))
        object.__setattr__(self, "focal_px", float(self.focal_px))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        r = self.rotation
        err = float(np.max(np.abs(r.T @ r - np.eye(3))))
        if err > ORTHONORMAL_TOL:
            raise DatasetError(f"rotation is not orthonormal (max deviation {err:.3e})")
        det = float(np.linalg.det(r))
        if abs(det - 1.0) > ORTHONORMAL_TOL:
            raise DatasetError(f"rotation determinant {det!r} is not 1")
        if not (math.isfinite(self.focal_px) and self.focal_px > 0):
            raise DatasetError("focal_px must be positive")
        if self.width < 1 or self.height < 1:
            raise DatasetError("image dimensions must be at least 1x1")

    def camera_to_world(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """RGB image, row-major, every channel in [0, 1]."""

    pixels: np.ndarray  # (height, width, 3)

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DatasetError(f"pixels must be (H, W, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DatasetError("pixels must be finite")
        if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
            raise DatasetError("pixel channels must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


class Frame(NamedTuple):
    pose: CameraPose
    image: ImageBuffer


@dataclass(frozen=True, eq=False)
class Dataset:
    """Posed training images plus the cubic scene bounds they were captured in."""

    frames: tuple[Frame, ...]
    scene_bbox: Cube
    background: np.ndarray  # (3,) RGB in [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        bg = _freeze(self.background, (3,), "background")
        if float(bg.min()) < 0.0 or float(bg.max()) > 1.0:
            raise DatasetError("background must lie in [0, 1]")
        object.__setattr__(self, "background", bg)
        dims = {(f.pose.width, f.pose.height) for f in self.frames}
        dims |= {(f.image.width, f.image.height) for f in self.frames}
        if len(dims) > 1:
            raise DatasetError("image dimension mismatch across frames")


@dataclass(frozen=True, eq=False)
class Primitive:
    """One analytic density primitive: a solid sphere or an axis-aligned box.

    size holds the sphere radius (1 value) or the box half-extents (3 values).
    """

    shape: Literal["sphere", "box"]
    center: np.ndarray
    size: np.ndarray
    density: float
    albedo: np.ndarray

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise DatasetError(f"unknown primitive shape {self.shape!r}")
        object.__setattr__(self, "center", _freeze(self.center, (3,), "center"))
        want = (1,) if self.shape == "sphere" else (3,)
        size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        object.__setattr__(self, "size", _freeze(size, want, "size"))
        if float(self.size.min()) <= 0.0:
            raise DatasetError("primitive size must be positive")
        object.__setattr__(self, "density", float(self.density))
        if not (math.isfinite(self.density) and self.density >= 0.0):
            raise DatasetError("primitive density must be finite and >= 0")
        alb = _freeze(self.albedo, (3,), "albedo")
        if float(alb.min()) < 0.0 or float(alb.max()) > 1.0:
            raise DatasetError("albedo must lie in [0, 1]")
        object.__setattr__(self, "albedo", alb)

    def signed_distance(self, pts):
        """Signed distance to the primitive boundary, negative inside: (n,)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        if self.shape == "sphere":
            return np.linalg.norm(pts - self.center, axis=-1) - self.size[0]
        q = np.abs(pts - self.center) - self.size
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def aabb(self):
        half = np.full(3, self.size[0]) if self.shape == "sphere" else self.size
        return self.center - half, self.center + half


def sphere(center, radius, density, albedo):
    return Primitive("sphere", center, [radius], density, albedo)


def box(center, half_extents, density, albedo):
    return Primitive("box", center, half_extents, density, albedo)


@dataclass(frozen=True)
class GroundTruthField:
    """Analytic density oracle: a sum of simple solid primitives."""

    primitives: tuple[Primitive, ...]

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def density_at(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        out = np.zeros(pts.shape[0])
        for p in self.primitives:
            out += p.density * (p.signed_distance(pts) <= 0.0)
        return out

    def signed_distances(self, pts):
        """Per-primitive signed distances: (n, num_primitives)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        if not self.primitives:
            return np.empty((pts.shape[0], 0))
        return np.stack([p.signed_distance(pts) for p in self.primitives], axis=1)

    def albedo_at(self, pts):
        """Density-weighted albedo blend; 0.5 gray where nothing is solid."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        num = np.zeros((pts.shape[0], 3))
        den = np.zeros(pts.shape[0])
        for p in self.primitives:
            w = p.density * (p.signed_distance(pts) <= 0.0)
            num += w[:, None] * p.albedo
            den += w
        out = np.full((pts.shape[0], 3), 0.5)
        hit = den > 0
        out[hit] = num[hit] / den[hit, None]
        return out

    def aabb(self):
        if not self.primitives:
            return None
        los, his = zip(*(p.aabb() for p in self.primitives))
        return np.min(los, axis=0), np.max(his, axis=0)


def gt_density_at(gt: GroundTruthField, x) -> float:
    """Total analytic density at one world position (additive over primitives)."""
    return float(gt.density_at(np.asarray(x, dtype=np.float64).reshape(1, 3))[0])


# ---------------------------------------------------------------------------
# Camera rigs
# ---------------------------------------------------------------------------

RigKind = Literal["full_sphere", "upper_hemisphere", "one_sided_half_hemisphere"]


def _look_at_pose(center, target, focal_px, width, height):
    forward = np.asarray(target, dtype=np.float64) - center
    dist = float(np.linalg.norm(forward))
    if dist == 0.0:
        raise DatasetError("camera center coincides with look_at")
    z_axis = -forward / dist  # camera +z points away from the target
    up = np.array([0.0, 0.0, 1.0])
    if abs(float(np.dot(up, z_axis))) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x_axis = np.cross(up, z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    rot = orthonormalize(np.column_stack([x_axis, y_axis, z_axis]))
    return CameraPose(rot, center, focal_px, width, height)


def camera_rig(kind: RigKind, n: int, radius: float, look_at,
               *, width: int = 64, height: int = 64,
               camera_angle_x: float = math.radians(60.0)) -> list[CameraPose]:
    """Deterministic Fibonacci-spiral camera shell, every camera aimed at look_at.

    full_sphere covers the whole shell, upper_hemisphere the z >= look_at.z
    half, and one_sided_half_hemisphere additionally restricts to y <= look_at.y
    (cameras covering the scene from one side only).
    """
    if n < 1:
        raise DatasetError("n must be >= 1")
    if radius <= 0:
        raise DatasetError("radius must be positive")
    look_at = np.asarray(look_at, dtype=np.float64)
    focal = width / (2.0 * math.tan(camera_angle_x / 2.0))
    poses = []
    for i in range(n):
        u = (i + 0.5) / n
        if kind == "full_sphere":
            z = 1.0 - 2.0 * u
            phi = GOLDEN_ANGLE * i
        elif kind == "upper_hemisphere":
            z = u
            phi = GOLDEN_ANGLE * i
        elif kind == "one_sided_half_hemisphere":
            z = u
            phi = math.pi + math.pi * ((i * GOLDEN_FRAC) % 1.0)  # sin(phi) <= 0, so y <= look_at.y
        else:
            raise DatasetError(f"unknown rig kind {kind!r}")
        s = math.sqrt(max(0.0, 1.0 - z * z))
        offset = np.array([s * math.cos(phi), s * math.sin(phi), z])
        poses.append(_look_at_pose(look_at + radius * offset, look_at, focal, width, height))
    return poses


# ---------------------------------------------------------------------------
# Synthetic scene generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RenderConfig:
    """Settings for producing ground-truth training images."""

    gt_res: int = 128
    step: float | None = None
    background: tuple = (1.0, 1.0, 1.0)
    bbox_margin: float = 0.15  # cube edge = (1 + margin) * largest content extent
    quantize_8bit: bool = True


def scene_bbox_for(gt: GroundTruthField, margin: float = 0.15) -> Cube:
    """Cube enclosing every primitive with a fractional margin on the largest extent."""
    aabb = gt.aabb()
    if aabb is None:
        return Cube(np.array([-1.0, -1.0, -1.0]), 2.0)
    lo, hi = aabb
    extent = float(np.max(hi - lo))
    edge = extent * (1.0 + margin) if extent > 0 else 1.0
    return Cube((lo + hi) / 2.0 - edge / 2.0, edge)


def field_from_ground_truth(gt: GroundTruthField, bbox: Cube, res: int):
    """Sample the analytic field onto a voxel lattice suitable for rendering."""
    from . import field as field_mod  # deferred: field builds on these types

    pts = bbox.lattice(res).reshape(-1, 3)
    dens = gt.density_at(pts).reshape(res, res, res)
    col = gt.albedo_at(pts).reshape(res, res, res, 3)
    return field_mod.VoxelField(bbox, dens, col)


def generate_synthetic_scene(gt: GroundTruthField, rig: Sequence[CameraPose],
                             render_cfg: RenderConfig | None = None) -> Dataset:
    """Render training images of the analytic scene with the reference renderer.

    Images are quantized to the 8-bit lattice (round(v*255)/255) so that the
    save/load round trip is exact.
    """
    from . import field as field_mod

    cfg = render_cfg or RenderConfig()
    bbox = scene_bbox_for(gt, cfg.bbox_margin)
    vf = field_from_ground_truth(gt, bbox, cfg.gt_res)
    bg = np.asarray(cfg.background, dtype=np.float64)
    frames = []
    for pose in rig:
        img = field_mod.render_image(vf, pose, step=cfg.step, background=bg)
        px = img.pixels
        if cfg.quantize_8bit:
            px = np.round(px * 255.0) / 255.0
        frames.append(Frame(pose, ImageBuffer(px)))
    return Dataset(tuple(frames), bbox, bg)


# ---------------------------------------------------------------------------
# Dataset I/O
# ---------------------------------------------------------------------------

MANIFEST_NAME = "scene.json"
GT_SIDECAR_NAME = "gt.json"
DEFAULT_BBOX = ((-1.5, -1.5, -1.5), 3.0)


def save_dataset(dataset: Dataset, path) -> None:
    """Write scene.json plus one 8-bit RGB PNG per frame; load_dataset inverts it."""
    if len(dataset.frames) == 0:
        raise DatasetError("no frames")
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    f0 = dataset.frames[0].pose.focal_px
    for fr in dataset.frames:
        if abs(fr.pose.focal_px - f0) > 1e-9 * max(1.0, f0):
            raise DatasetError("manifest format requires one shared focal length")
    angle = 2.0 * math.atan(dataset.frames[0].pose.width / (2.0 * f0))
    frames_json = []
    for i, fr in enumerate(dataset.frames):
        rel = f"images/frame_{i:04d}.png"
        arr = np.round(fr.image.pixels * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(root / rel)
        frames_json.append({
            "file_path": rel,
            "transform_matrix": fr.pose.camera_to_world().tolist(),
        })
    manifest = {
        "camera_angle_x": angle,
        "background": dataset.background.tolist(),
        "bbox": {"min": dataset.scene_bbox.min_corner.tolist(), "edge": dataset.scene_bbox.edge},
        "frames": frames_json,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))


def _load_image(path: Path) -> ImageBuffer:
    if not path.exists():
        raise DatasetError(f"missing image file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImageBuffer(arr)


def load_dataset(path) -> Dataset:
    """Load a dataset directory (or manifest file) written in the scene.json format."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME if root.is_dir() else root
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    try:
        meta = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest: {exc}") from exc
    if "camera_angle_x" not in meta:
        raise DatasetError("manifest is missing camera_angle_x")
    angle = float(meta["camera_angle_x"])
    background = np.asarray(meta.get("background", (1.0, 1.0, 1.0)), dtype=np.float64)
    if "bbox" in meta:
        bbox = Cube(np.asarray(meta["bbox"]["min"], dtype=np.float64), float(meta["bbox"]["edge"]))
    else:
        bbox = Cube(np.asarray(DEFAULT_BBOX[0]), DEFAULT_BBOX[1])
    base = manifest_path.parent

    frames = []
    for k, entry in enumerate(meta.get("frames", [])):
        m = np.asarray(entry["transform_matrix"], dtype=np.float64)
        if m.shape != (4, 4):
            raise DatasetError(f"frame {k}: malformed transform_matrix (not 4x4)")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise DatasetError(f"frame {k}: malformed transform_matrix (bad bottom row)")
        r, t = m[:3, :3], m[:3, 3]
        if float(np.linalg.det(r)) < 0:
            raise DatasetError(f"frame {k}: improper rotation (negative determinant)")
        err = float(np.max(np.abs(r.T @ r - np.eye(3))))
        if err > REPAIR_TOL:
            raise DatasetError(f"frame {k}: non-orthonormal rotation beyond tolerance ({err:.3e})")
        r = orthonormalize(r)
        img_path = base / entry["file_path"]
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        image = _load_image(img_path)
        focal = image.width / (2.0 * math.tan(angle / 2.0))
        frames.append(Frame(CameraPose(r, t, focal, image.width, image.height), image))
    if not frames:
        raise DatasetError("no frames")
    return Dataset(tuple(frames), bbox, background)


def save_ground_truth(gt: GroundTruthField, path) -> None:
    doc = {"primitives": [
        {
            "shape": p.shape,
            "center": p.center.tolist(),
            "size": float(p.size[0]) if p.shape == "sphere" else p.size.tolist(),
            "density": p.density,
            "albedo": p.albedo.tolist(),
        }
        for p in gt.primitives
    ]}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_ground_truth(path) -> GroundTruthField:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read ground truth: {exc}") from exc
    prims = []
    for entry in doc.get("primitives", []):
        size = entry["size"]
        size = [size] if np.isscalar(size) else size
        prims.append(Primitive(entry["shape"], entry["center"], size,
                               entry["density"], entry["albedo"]))
    return GroundTruthField(tuple(prims))
