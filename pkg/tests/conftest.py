import math

import numpy as np
import pytest

from voxens.dataset import (Cube, GroundTruthField, RenderConfig, box, camera_rig,
                            generate_synthetic_scene, sphere)
from voxens.field import VoxelField, render_ray


def random_unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_field(rng, res=8, edge=2.0, lo=0.05, hi=1.5):
    """A field whose raw values stay away from the rectifier kink at 0."""
    bbox = Cube(np.array([-edge / 2, -edge / 2, -edge / 2]), edge)
    raw = rng.uniform(lo, hi, size=(res, res, res))
    # sprinkle in clearly-negative nodes; their gradient is 0 by construction
    neg = rng.random((res, res, res)) < 0.15
    raw[neg] = -rng.uniform(0.2, 1.0, size=int(neg.sum()))
    color = rng.uniform(0.1, 0.9, size=(res, res, res, 3))
    return VoxelField(bbox, raw, color)


def fd_gradient_check(field, ray, step, background, upstream, h=1e-4,
                      grad_floor=1e-6):
    """Central finite differences vs analytic gradients for one ray.

    Returns the max relative error over touched parameters with
    |analytic gradient| > grad_floor.
    """
    from voxens.field import render_ray_backward

    upstream = np.asarray(upstream, dtype=np.float64)

    def forward():
        rgb, _ = render_ray(field, ray, step=step, background=background)
        return float(upstream @ rgb)

    d_density, d_color = render_ray_backward(field, ray, step, background, upstream)
    max_rel = 0.0
    checked = 0
    for arr, grad in ((field.density_raw, d_density), (field.color, d_color)):
        for flat_i in np.flatnonzero(np.abs(grad) > grad_floor):
            idx = np.unravel_index(flat_i, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            f_plus = forward()
            arr[idx] = orig - h
            f_minus = forward()
            arr[idx] = orig
            fd = (f_plus - f_minus) / (2 * h)
            rel = abs(fd - grad[idx]) / max(abs(grad[idx]), grad_floor)
            max_rel = max(max_rel, rel)
            checked += 1
    return max_rel, checked


# --- desk-scale reference scene (shared by trainer/cli/acceptance tests) ---

DESK_RADIUS = 0.88


def desk_ground_truth() -> GroundTruthField:
    from voxens.cli import SCENE_PRESETS

    return SCENE_PRESETS["sphere-occluder"]()


@pytest.fixture(scope="session")
def tiny_dataset():
    """A small, fast scene for trainer-level tests (not the desk config)."""
    gt = GroundTruthField((sphere((0.0, 0.0, 0.0), 0.2, 250.0, (0.8, 0.3, 0.2)),))
    rig = camera_rig("full_sphere", 6, 0.8, (0, 0, 0), width=32, height=32)
    return generate_synthetic_scene(gt, rig, RenderConfig(gt_res=48)), gt


@pytest.fixture(scope="session")
def tiny_background_dataset():
    """Images that are exactly the background color everywhere."""
    gt = GroundTruthField(())
    rig = camera_rig("full_sphere", 4, 0.8, (0, 0, 0), width=24, height=24)
    return generate_synthetic_scene(gt, rig, RenderConfig(gt_res=32))
