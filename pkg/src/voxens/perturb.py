"""Reproducible Gaussian data constraints: image noise and pose noise.

Every draw comes from the counter-based Philox generator keyed by
(seed, item index), so outputs are bit-reproducible, independent of
evaluation order, and identical across platforms.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .dataset import CameraPose, Dataset, Frame, ImageBuffer, orthonormalize

log = logging.getLogger(__name__)

GIMBAL_TOL_DEG = 1e-6
# sin-domain window covering at least the GIMBAL_TOL_DEG ball around +-90 deg;
# asin is too ill-conditioned near 1 to test the angle itself
_GIMBAL_SIN_TOL = 1e-12
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoiseSpec:
    """Data-constraint configuration.

    sigma_im is in 8-bit intensity units, sigma_t in world units and
    sigma_r_deg in degrees. Combined pose noise applies translation noise
    first, then rotation noise, with derived sub-seeds.
    """

    sigma_im: float = 0.0
    sigma_t: float = 0.0
    sigma_r_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_im", "sigma_t", "sigma_r_deg"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0")
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def is_zero(self) -> bool:
        return self.sigma_im == 0.0 and self.sigma_t == 0.0 and self.sigma_r_deg == 0.0


def _rng(seed: int, item: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, item & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def perturb_images(images, sigma_im: float, seed: int) -> list[ImageBuffer]:
    """Add N(0, (sigma_im / 255)^2) per pixel and channel, then clamp to [0, 1]."""
    if sigma_im < 0:
        raise ValueError("sigma_im must be >= 0")
    if sigma_im == 0:
        return list(images)
    out = []
    for i, img in enumerate(images):
        noise = _rng(seed, i).normal(0.0, sigma_im / 255.0, size=img.pixels.shape)
        out.append(ImageBuffer(np.clip(img.pixels + noise, 0.0, 1.0)))
    return out


def perturb_translation(poses, sigma_t: float, seed: int) -> list[CameraPose]:
    """Add independent N(0, sigma_t^2) to each translation component; rotations untouched."""
    if sigma_t < 0:
        raise ValueError("sigma_t must be >= 0")
    if sigma_t == 0:
        return list(poses)
    out = []
    for i, pose in enumerate(poses):
        t = pose.translation + _rng(seed, i).normal(0.0, sigma_t, size=3)
        out.append(CameraPose(pose.rotation, t, pose.focal_px, pose.width, pose.height))
    return out


def _gimbal_locked(rot: np.ndarray) -> bool:
    # intrinsic XYZ: R[0, 2] == sin(middle angle)
    return abs(float(rot[0, 2])) >= 1.0 - _GIMBAL_SIN_TOL


def perturb_rotation(poses, sigma_r_deg: float, seed: int) -> list[CameraPose]:
    """Perturb intrinsic XYZ Euler angles by N(0, sigma_r_deg^2) per axis (degrees).

    Poses whose pitch lies within GIMBAL_TOL_DEG of +-90 degrees fall back to
    an axis-angle perturbation with the same per-axis sigma; the fallback is
    flagged through a logging warning. Translations are untouched and every
    output rotation is re-orthonormalized.
    """
    if sigma_r_deg < 0:
        raise ValueError("sigma_r_deg must be >= 0")
    if sigma_r_deg == 0:
        return list(poses)
    out = []
    for i, pose in enumerate(poses):
        eps_deg = _rng(seed, i).normal(0.0, sigma_r_deg, size=3)
        if _gimbal_locked(pose.rotation):
            log.warning("pose %d is gimbal-locked (|sin(pitch)| ~ 1); "
                        "using axis-angle fallback", i)
            delta = Rotation.from_rotvec(np.radians(eps_deg))
            new_rot = (delta * Rotation.from_matrix(pose.rotation)).as_matrix()
        else:
            angles = Rotation.from_matrix(pose.rotation).as_euler("XYZ", degrees=True)
            new_rot = Rotation.from_euler("XYZ", angles + eps_deg, degrees=True).as_matrix()
        out.append(CameraPose(orthonormalize(new_rot), pose.translation,
                              pose.focal_px, pose.width, pose.height))
    return out


def apply_noise(dataset: Dataset, spec: NoiseSpec) -> Dataset:
    """Apply image noise, then translation noise, then rotation noise.

    The three legs use derived sub-seeds (seed, seed + 1, seed + 2) so that
    the combined pose configuration is a sequential composition of the
    individual perturbations.
    """
    images = [f.image for f in dataset.frames]
    poses = [f.pose for f in dataset.frames]
    if spec.sigma_im > 0:
        images = perturb_images(images, spec.sigma_im, spec.seed)
    if spec.sigma_t > 0:
        poses = perturb_translation(poses, spec.sigma_t, spec.seed + 1)
    if spec.sigma_r_deg > 0:
        poses = perturb_rotation(poses, spec.sigma_r_deg, spec.seed + 2)
    frames = tuple(Frame(p, im) for p, im in zip(poses, images))
    return Dataset(frames, dataset.scene_bbox, dataset.background)


def percent_of_circumference(percent: float, rig_radius: float) -> float:
    """Convert a percentage of the camera-ring circumference into world units."""
    if percent < 0:
        raise ValueError("percent must be >= 0")
    if rig_radius <= 0:
        raise ValueError("rig_radius must be positive")
    return (percent / 100.0) * 2.0 * math.pi * rig_radius
