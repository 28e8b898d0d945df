import math

import numpy as np
import pytest

from conftest import fd_gradient_check, random_field, random_unit_vectors
from voxens.dataset import Cube, camera_rig
from voxens.field import (FieldError, Ray, VoxelField, activate_density,
                          box_spans, camera_rays, load_field, render_image,
                          render_ray, render_ray_backward, render_rays,
                          save_field, sample_raw)

BBOX = Cube(np.array([-1.0, -1.0, -1.0]), 2.0)


# --- sampling ---

def test_sample_constant_field():
    f = VoxelField.zeros(BBOX, 8, raw=3.25)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(200, 3))
    assert np.allclose(sample_raw(f, pts), 3.25, atol=1e-12)
    assert sample_raw(f, np.array([-1.0, -1.0, -1.0])) == pytest.approx(3.25)


def test_sample_at_nodes():
    rng = np.random.default_rng(1)
    f = VoxelField(BBOX, rng.normal(size=(5, 5, 5)), np.full((5, 5, 5, 3), 0.5))
    lat = BBOX.lattice(5)
    for idx in [(0, 0, 0), (4, 4, 4), (2, 3, 1), (0, 4, 2)]:
        assert sample_raw(f, lat[idx]) == pytest.approx(f.density_raw[idx], abs=1e-12)


def test_sample_edge_midpoint():
    f = VoxelField.zeros(BBOX, 3, raw=0.0)
    f.density_raw[1, 1, 1] = 0.0
    f.density_raw[2, 1, 1] = 2.0
    lat = BBOX.lattice(3)
    mid = 0.5 * (lat[1, 1, 1] + lat[2, 1, 1])
    assert sample_raw(f, mid) == pytest.approx(1.0, abs=1e-12)


def test_sample_outside_is_zero():
    f = VoxelField.zeros(BBOX, 4, raw=7.0)
    assert sample_raw(f, np.array([1.5, 0.0, 0.0])) == 0.0
    assert sample_raw(f, np.array([0.0, 0.0, -1.0000001])) == 0.0


def test_activate_density():
    assert activate_density(-3.0) == 0.0
    assert activate_density(0.0) == 0.0
    assert activate_density(15.0) == 15.0
    arr = activate_density(np.array([-1.0, 0.5]))
    assert np.array_equal(arr, [0.0, 0.5])


def test_ray_validation():
    with pytest.raises(FieldError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]), 0.0, 1.0)  # not unit
    with pytest.raises(FieldError):
        Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 1.0, 0.5)
    with pytest.raises(FieldError):
        Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), -0.1, 0.5)


# --- forward rendering ---

def test_render_ray_empty_space():
    f = VoxelField.zeros(BBOX, 8, raw=0.0)
    ray = Ray(np.array([-2.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), 0.0, 4.0)
    rgb, t_final = render_ray(f, ray, step=0.05, background=(0.1, 0.2, 0.3))
    assert t_final == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(rgb, [0.1, 0.2, 0.3], atol=1e-12)


def test_render_ray_homogeneous_closed_form():
    f = VoxelField.zeros(BBOX, 8, raw=1.0)
    ray = Ray(np.array([-0.8, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), 0.3, 1.3)
    _, t_final = render_ray(f, ray, step=0.1, background=(1, 1, 1))
    assert abs(t_final - math.exp(-1.0)) <= 1e-9
    # marched length is an integer multiple of the step in both cases
    _, t_final2 = render_ray(f, ray, step=0.25, background=(1, 1, 1))
    assert abs(t_final2 - math.exp(-1.0)) <= 1e-9


def test_render_ray_opaque_slab():
    f = VoxelField.zeros(BBOX, 8, raw=25.0, color=0.0)
    f.color[..., 0] = 1.0  # albedo (1, 0, 0)
    ray = Ray(np.array([0.0, 0.0, -2.0]), np.array([0.0, 0.0, 1.0]), 1.0, 3.0)
    rgb, t_final = render_ray(f, ray, step=0.05, background=(0.0, 0.0, 1.0))
    assert t_final <= math.exp(-20.0)
    assert np.allclose(rgb, [1.0, 0.0, 0.0], atol=1e-6)


def test_partition_of_unity_random_rays():
    # with unit colors and black background the rendered channel equals the
    # sum of compositing weights, so rgb + T_final must be exactly 1
    rng = np.random.default_rng(7)
    f = random_field(rng, res=12, lo=-1.0, hi=25.0)
    f.color[:] = 1.0
    n = 2000
    origins = rng.uniform(-2, 2, size=(n, 3))
    dirs = random_unit_vectors(rng, n)
    t0 = rng.uniform(0.0, 0.5, size=n)
    t1 = t0 + rng.uniform(0.5, 4.0, size=n)
    out, t_final, _ = render_rays(f, origins, dirs, t0, t1, 0.07, (0, 0, 0))
    assert np.max(np.abs(out + t_final[:, None] - 1.0)) <= 1e-9


def test_t_final_monotone_in_density():
    rng = np.random.default_rng(8)
    f = random_field(rng, res=6)
    ray = Ray(np.array([-1.5, 0.1, -0.2]),
              np.array([1.0, 0.0, 0.0]), 0.0, 3.0)
    _, t_ref = render_ray(f, ray, step=0.05)
    for idx in [(2, 3, 2), (3, 3, 3), (0, 0, 0), (4, 3, 2)]:
        bumped = VoxelField(f.bbox, f.density_raw.copy(), f.color.copy())
        bumped.density_raw[idx] += 0.5
        _, t_new = render_ray(bumped, ray, step=0.05)
        assert t_new <= t_ref + 1e-15


def test_rendered_channels_stay_in_unit_range():
    rng = np.random.default_rng(9)
    f = random_field(rng, res=10, lo=-2.0, hi=40.0)
    n = 500
    origins = rng.uniform(-2, 2, size=(n, 3))
    dirs = random_unit_vectors(rng, n)
    out, _, _ = render_rays(f, origins, dirs, np.zeros(n), np.full(n, 5.0),
                            0.06, (1.0, 1.0, 1.0))
    assert out.min() >= -1e-12 and out.max() <= 1.0 + 1e-12


# --- image rendering ---

def _test_pose(radius=2.5, width=24, height=20):
    return camera_rig("full_sphere", 1, radius, (0, 0, 0),
                      width=width, height=height)[0]


def test_render_image_zero_field_is_background():
    f = VoxelField.zeros(BBOX, 8, raw=-1.0)
    img = render_image(f, _test_pose(), background=(0.3, 0.6, 0.9))
    assert np.allclose(img.pixels, [0.3, 0.6, 0.9], atol=1e-12)


def test_render_image_deterministic():
    rng = np.random.default_rng(10)
    f = random_field(rng, res=10, lo=-1.0, hi=30.0)
    a = render_image(f, _test_pose())
    b = render_image(f, _test_pose())
    assert np.array_equal(a.pixels, b.pixels)


def test_render_image_matches_per_pixel_render_ray():
    rng = np.random.default_rng(11)
    f = random_field(rng, res=8, lo=-0.5, hi=20.0)
    pose = _test_pose(width=8, height=6)
    img = render_image(f, pose, background=(1, 1, 1))
    origins, dirs, t0, t1 = camera_rays(pose, f.bbox)
    for i in [0, 13, 29, 47]:
        px = img.pixels.reshape(-1, 3)[i]
        if t1[i] > t0[i]:
            rgb, _ = render_ray(f, Ray(origins[i], dirs[i], t0[i], t1[i]))
            assert np.allclose(px, np.clip(rgb, 0, 1), atol=1e-9)
        else:
            assert np.allclose(px, [1, 1, 1], atol=1e-12)


def test_render_image_translation_equivariance():
    rng = np.random.default_rng(12)
    f = random_field(rng, res=9, lo=-0.5, hi=25.0)
    pose = _test_pose()
    img = render_image(f, pose)
    shift = np.array([10.0, -3.0, 7.0])
    f2 = VoxelField(Cube(f.bbox.min_corner + shift, f.bbox.edge),
                    f.density_raw, f.color)
    from voxens.dataset import CameraPose
    pose2 = CameraPose(pose.rotation, pose.translation + shift,
                       pose.focal_px, pose.width, pose.height)
    img2 = render_image(f2, pose2)
    assert np.max(np.abs(img.pixels - img2.pixels)) <= 1e-6


def test_render_image_rotation_equivariance():
    # rotate scene and camera together by 90 degrees about z through the
    # box center: pixels must be unchanged
    rng = np.random.default_rng(13)
    f = random_field(rng, res=9, lo=-0.5, hi=25.0)
    rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    center = f.bbox.center

    rot_density = np.rot90(f.density_raw, 1, axes=(0, 1))
    rot_color = np.rot90(f.color, 1, axes=(0, 1))
    f_rot = VoxelField(f.bbox, rot_density, rot_color)

    # sanity: the rotated lattice really represents the rotated function
    p = np.array([0.31, -0.12, 0.44])
    q = rz @ (p - center) + center
    assert sample_raw(f_rot, q) == pytest.approx(sample_raw(f, p), abs=1e-9)

    pose = _test_pose()
    from voxens.dataset import CameraPose
    pose_rot = CameraPose(rz @ pose.rotation, rz @ (pose.translation - center) + center,
                          pose.focal_px, pose.width, pose.height)
    img = render_image(f, pose)
    img_rot = render_image(f_rot, pose_rot)
    assert np.max(np.abs(img.pixels - img_rot.pixels)) <= 1e-6


def test_box_spans_miss_and_hit():
    bbox = Cube(np.array([-1.0, -1.0, -1.0]), 2.0)
    origins = np.array([[-3.0, 0.0, 0.0], [-3.0, 5.0, 0.0], [0.0, 0.0, 0.0]])
    dirs = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    t0, t1 = box_spans(origins, dirs, bbox)
    assert t0[0] == pytest.approx(2.0) and t1[0] == pytest.approx(4.0)
    assert t1[1] == t0[1]  # miss: zero-length span
    assert t0[2] == pytest.approx(0.0) and t1[2] == pytest.approx(1.0)  # inside


# --- gradients ---

def test_backward_zero_upstream():
    rng = np.random.default_rng(14)
    f = random_field(rng, res=6)
    ray = Ray(np.array([-1.5, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), 0.0, 3.0)
    d_density, d_color = render_ray_backward(f, ray, 0.05, (1, 1, 1), np.zeros(3))
    assert np.all(d_density == 0.0)
    assert np.all(d_color == 0.0)


def test_backward_single_sample_closed_form():
    rng = np.random.default_rng(15)
    f = random_field(rng, res=6)
    ray = Ray(np.array([-0.35, 0.05, 0.1]), np.array([1.0, 0.0, 0.0]), 0.9, 1.0)
    step = 0.1  # exactly one sample at t = 0.95
    x = ray.origin + 0.95 * ray.direction
    alpha0 = 1.0 - math.exp(-max(sample_raw(f, x), 0.0) * step)
    for ch in range(3):
        upstream = np.zeros(3)
        upstream[ch] = 1.0
        _, d_color = render_ray_backward(f, ray, step, (0, 0, 0), upstream)
        # gradient distributes T0 * alpha0 over the 8 trilinear corners
        assert float(d_color[..., ch].sum()) == pytest.approx(alpha0, abs=1e-12)
        others = [c for c in range(3) if c != ch]
        assert float(np.abs(d_color[..., others]).max()) == 0.0


def test_gradient_vs_finite_differences():
    rng = np.random.default_rng(16)
    f = random_field(rng, res=6)
    worst = 0.0
    total = 0
    for _ in range(3):
        d = random_unit_vectors(rng, 1)[0]
        o = rng.uniform(-0.4, 0.4, size=3) - 1.8 * d
        ray = Ray(o, d, 0.2, 3.2)
        upstream = rng.uniform(0.2, 1.0, size=3)
        rel, checked = fd_gradient_check(f, ray, 0.11, (0.6, 0.4, 0.2), upstream)
        worst = max(worst, rel)
        total += checked
    assert total > 100
    assert worst <= 1e-4


# --- snapshots ---

def test_field_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(17)
    f = random_field(rng, res=7)
    path = tmp_path / "member.vxf"
    save_field(f, path)
    loaded = load_field(path)
    assert loaded.res == f.res
    assert loaded.bbox.edge == pytest.approx(f.bbox.edge)
    assert np.allclose(loaded.density_raw, f.density_raw, atol=1e-6)
    assert np.allclose(loaded.color, f.color, atol=1e-6)


def test_field_snapshot_rejects_bad_magic(tmp_path):
    path = tmp_path / "bogus.vxf"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FieldError, match="magic"):
        load_field(path)
