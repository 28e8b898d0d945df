"""Dense voxel radiance field with a differentiable emission-absorption renderer.

The field stores pre-activation ("raw") density and post-activation RGB on a
node-aligned lattice inside a cubic bounding box. Rendering marches rays at a
fixed step with midpoint samples; per sample alpha = 1 - exp(-density * step)
and transmittance is the running product of (1 - alpha). Gradients are the
exact reverse-mode derivatives of that quadrature.

Internally a batch of rays is packed into one flat sample array (rays have
different sample counts); per-ray cumulative quantities are segmented cumsums
over optical depth, which avoids any division in the backward pass.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .dataset import CameraPose, Cube, ImageBuffer

_COUNT_GUARD = 1e-9  # absorbs float error in span/step before flooring


class FieldError(ValueError):
    pass


@dataclass(eq=False)
class VoxelField:
    """One ensemble member: raw density and RGB color on a res^3 lattice.

    density_raw[i, j, k] indexes (x, y, z); node (i, j, k) sits at
    bbox.min_corner + (i, j, k) / (res - 1) * edge. The field is 0 outside
    the box. Arrays are mutated by the trainer but must be treated as
    read-only while rendering.
    """

    bbox: Cube
    density_raw: np.ndarray  # (res, res, res), any sign
    color: np.ndarray        # (res, res, res, 3) in [0, 1]

    def __post_init__(self):
        self.density_raw = np.ascontiguousarray(self.density_raw, dtype=np.float64)
        self.color = np.ascontiguousarray(self.color, dtype=np.float64)
        shp = self.density_raw.shape
        if len(shp) != 3 or len(set(shp)) != 1 or shp[0] < 2:
            raise FieldError(f"density_raw must be cubic with res >= 2, got {shp}")
        if self.color.shape != (*shp, 3):
            raise FieldError(f"color must have shape {(*shp, 3)}, got {self.color.shape}")
        if not (np.all(np.isfinite(self.density_raw)) and np.all(np.isfinite(self.color))):
            raise FieldError("field values must be finite")
        if float(self.color.min()) < 0.0 or float(self.color.max()) > 1.0:
            raise FieldError("color values must lie in [0, 1]")

    @property
    def res(self) -> int:
        return self.density_raw.shape[0]

    @property
    def default_step(self) -> float:
        return self.bbox.edge / (2.0 * self.res)

    @classmethod
    def zeros(cls, bbox: Cube, res: int, raw: float = 0.0, color: float = 0.5):
        return cls(bbox, np.full((res, res, res), float(raw)),
                   np.full((res, res, res, 3), float(color)))


@dataclass(frozen=True, eq=False)
class Ray:
    """A unit-direction ray marched over [t_near, t_far]."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        origin = np.array(self.origin, dtype=np.float64).reshape(3)
        direction = np.array(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "t_near", float(self.t_near))
        object.__setattr__(self, "t_far", float(self.t_far))
        if not np.all(np.isfinite(origin)) or not np.all(np.isfinite(direction)):
            raise FieldError("ray origin/direction must be finite")
        if abs(float(np.linalg.norm(direction)) - 1.0) > 1e-9:
            raise FieldError("ray direction must be a unit vector")
        if not (0.0 <= self.t_near < self.t_far and math.isfinite(self.t_far)):
            raise FieldError("need 0 <= t_near < t_far")


# ---------------------------------------------------------------------------
# Trilinear interpolation
# ---------------------------------------------------------------------------

_CORNER_X = np.array([0, 0, 0, 0, 1, 1, 1, 1])
_CORNER_Y = np.array([0, 0, 1, 1, 0, 0, 1, 1])
_CORNER_Z = np.array([0, 1, 0, 1, 0, 1, 0, 1])


def _trilinear_setup(bbox: Cube, res: int, pts):
    """Flat corner indices (n, 8), weights (n, 8) and the inside-box mask (n,)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    lo = bbox.min_corner
    inside = np.all((pts >= lo) & (pts <= lo + bbox.edge), axis=-1)
    u = (pts - lo) * ((res - 1) / bbox.edge)
    u = np.clip(u, 0.0, res - 1.0)
    i0 = np.minimum(u.astype(np.int64), res - 2)
    f = u - i0
    base = (i0[:, 0] * res + i0[:, 1]) * res + i0[:, 2]
    offs = (_CORNER_X * res + _CORNER_Y) * res + _CORNER_Z
    idx = base[:, None] + offs[None, :]

    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    w = np.empty((pts.shape[0], 8))
    w00 = gx * gy
    w01 = gx * fy
    w10 = fx * gy
    w11 = fx * fy
    w[:, 0] = w00 * gz
    w[:, 1] = w00 * fz
    w[:, 2] = w01 * gz
    w[:, 3] = w01 * fz
    w[:, 4] = w10 * gz
    w[:, 5] = w10 * fz
    w[:, 6] = w11 * gz
    w[:, 7] = w11 * fz
    return idx, w, inside


def sample_raw(field: VoxelField, x):
    """Trilinearly interpolated raw density at world position(s); 0 outside the box.

    Accepts a single (3,) point or an (n, 3) batch.
    """
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    idx, w, inside = _trilinear_setup(field.bbox, field.res, pts)
    vals = (field.density_raw.reshape(-1)[idx] * w).sum(axis=1)
    vals = np.where(inside, vals, 0.0)
    return float(vals[0]) if single else vals


def activate_density(raw):
    """Rectified density fed to the renderer: max(raw, 0)."""
    arr = np.asarray(raw, dtype=np.float64)
    out = np.maximum(arr, 0.0)
    return float(out) if arr.ndim == 0 else out


# ---------------------------------------------------------------------------
# Batched ray marching (numba kernels; marching is the training hot loop)
# ---------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True, fastmath=False)
def _forward_kernel(packed, res, lo, edge, origins, dirs, t0, counts, step, bg,
                    out_rgb, out_tf):
    scale = (res - 1.0) / edge
    hi0 = lo[0] + edge
    hi1 = lo[1] + edge
    hi2 = lo[2] + edge
    for r in range(origins.shape[0]):
        depth = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for k in range(counts[r]):
            t = t0[r] + (k + 0.5) * step
            p0 = origins[r, 0] + t * dirs[r, 0]
            p1 = origins[r, 1] + t * dirs[r, 1]
            p2 = origins[r, 2] + t * dirs[r, 2]
            if p0 < lo[0] or p0 > hi0 or p1 < lo[1] or p1 > hi1 \
                    or p2 < lo[2] or p2 > hi2:
                continue
            u0 = (p0 - lo[0]) * scale
            u1 = (p1 - lo[1]) * scale
            u2 = (p2 - lo[2]) * scale
            i0 = min(int(u0), res - 2)
            i1 = min(int(u1), res - 2)
            i2 = min(int(u2), res - 2)
            f0 = u0 - i0
            f1 = u1 - i1
            f2 = u2 - i2
            base = (i0 * res + i1) * res + i2
            raw = 0.0
            sr = 0.0
            sg = 0.0
            sb = 0.0
            for dx in range(2):
                wx = f0 if dx == 1 else 1.0 - f0
                for dy in range(2):
                    wxy = wx * (f1 if dy == 1 else 1.0 - f1)
                    for dz in range(2):
                        wv = wxy * (f2 if dz == 1 else 1.0 - f2)
                        node = base + (dx * res + dy) * res + dz
                        raw += wv * packed[node, 0]
                        sr += wv * packed[node, 1]
                        sg += wv * packed[node, 2]
                        sb += wv * packed[node, 3]
            tau = raw * step if raw > 0.0 else 0.0
            weight = math.exp(-depth) * (-math.expm1(-tau))
            c0 += weight * sr
            c1 += weight * sg
            c2 += weight * sb
            depth += tau
        tf = math.exp(-depth)
        out_rgb[r, 0] = c0 + tf * bg[0]
        out_rgb[r, 1] = c1 + tf * bg[1]
        out_rgb[r, 2] = c2 + tf * bg[2]
        out_tf[r] = tf


@numba.njit(cache=True, nogil=True, fastmath=False)
def _backward_kernel(packed, res, lo, edge, origins, dirs, t0, counts, step, bg,
                     g_rgb, d_packed, scratch):
    # dL/d(tau_k) = g_w_k * T_{k+1} - sum_{j>k} g_w_j * w_j - g_tf * t_final
    scale = (res - 1.0) / edge
    hi0 = lo[0] + edge
    hi1 = lo[1] + edge
    hi2 = lo[2] + edge
    tau_s = scratch[0]
    trans_s = scratch[1]
    weight_s = scratch[2]
    gw_s = scratch[3]
    for r in range(origins.shape[0]):
        n = counts[r]
        depth = 0.0
        for k in range(n):
            t = t0[r] + (k + 0.5) * step
            p0 = origins[r, 0] + t * dirs[r, 0]
            p1 = origins[r, 1] + t * dirs[r, 1]
            p2 = origins[r, 2] + t * dirs[r, 2]
            if p0 < lo[0] or p0 > hi0 or p1 < lo[1] or p1 > hi1 \
                    or p2 < lo[2] or p2 > hi2:
                tau_s[k] = 0.0
                trans_s[k] = math.exp(-depth)
                weight_s[k] = 0.0
                gw_s[k] = 0.0
                continue
            u0 = (p0 - lo[0]) * scale
            u1 = (p1 - lo[1]) * scale
            u2 = (p2 - lo[2]) * scale
            i0 = min(int(u0), res - 2)
            i1 = min(int(u1), res - 2)
            i2 = min(int(u2), res - 2)
            f0 = u0 - i0
            f1 = u1 - i1
            f2 = u2 - i2
            base = (i0 * res + i1) * res + i2
            raw = 0.0
            sr = 0.0
            sg = 0.0
            sb = 0.0
            for dx in range(2):
                wx = f0 if dx == 1 else 1.0 - f0
                for dy in range(2):
                    wxy = wx * (f1 if dy == 1 else 1.0 - f1)
                    for dz in range(2):
                        wv = wxy * (f2 if dz == 1 else 1.0 - f2)
                        node = base + (dx * res + dy) * res + dz
                        raw += wv * packed[node, 0]
                        sr += wv * packed[node, 1]
                        sg += wv * packed[node, 2]
                        sb += wv * packed[node, 3]
            tau = raw * step if raw > 0.0 else 0.0
            trans = math.exp(-depth)
            weight = trans * (-math.expm1(-tau))
            tau_s[k] = tau
            trans_s[k] = trans
            weight_s[k] = weight
            gw_s[k] = g_rgb[r, 0] * sr + g_rgb[r, 1] * sg + g_rgb[r, 2] * sb
            depth += tau
        t_final = math.exp(-depth)
        g_tf = g_rgb[r, 0] * bg[0] + g_rgb[r, 1] * bg[1] + g_rgb[r, 2] * bg[2]
        suffix = g_tf * t_final
        for k in range(n - 1, -1, -1):
            t = t0[r] + (k + 0.5) * step
            p0 = origins[r, 0] + t * dirs[r, 0]
            p1 = origins[r, 1] + t * dirs[r, 1]
            p2 = origins[r, 2] + t * dirs[r, 2]
            if p0 < lo[0] or p0 > hi0 or p1 < lo[1] or p1 > hi1 \
                    or p2 < lo[2] or p2 > hi2:
                continue
            g_tau = gw_s[k] * trans_s[k] * math.exp(-tau_s[k]) - suffix
            suffix += gw_s[k] * weight_s[k]
            g_raw = g_tau * step if tau_s[k] > 0.0 else 0.0
            gc = weight_s[k]
            u0 = (p0 - lo[0]) * scale
            u1 = (p1 - lo[1]) * scale
            u2 = (p2 - lo[2]) * scale
            i0 = min(int(u0), res - 2)
            i1 = min(int(u1), res - 2)
            i2 = min(int(u2), res - 2)
            f0 = u0 - i0
            f1 = u1 - i1
            f2 = u2 - i2
            base = (i0 * res + i1) * res + i2
            for dx in range(2):
                wx = f0 if dx == 1 else 1.0 - f0
                for dy in range(2):
                    wxy = wx * (f1 if dy == 1 else 1.0 - f1)
                    for dz in range(2):
                        wv = wxy * (f2 if dz == 1 else 1.0 - f2)
                        node = base + (dx * res + dy) * res + dz
                        d_packed[node, 0] += wv * g_raw
                        d_packed[node, 1] += wv * gc * g_rgb[r, 0]
                        d_packed[node, 2] += wv * gc * g_rgb[r, 1]
                        d_packed[node, 3] += wv * gc * g_rgb[r, 2]


@dataclass(eq=False)
class MarchCache:
    """Inputs of one forward pass, kept so the backward pass can replay it.

    Valid only while the field arrays are unchanged.
    """

    origins: np.ndarray
    dirs: np.ndarray
    t0: np.ndarray
    counts: np.ndarray
    step: float
    background: np.ndarray


def _packed_nodes(field: VoxelField) -> np.ndarray:
    packed = np.empty((field.res ** 3, 4))
    packed[:, 0] = field.density_raw.reshape(-1)
    packed[:, 1:] = field.color.reshape(-1, 3)
    return packed


def _ray_arrays(origins, dirs, t_near, t_far, step):
    origins = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    dirs = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
    t0 = np.ascontiguousarray(np.asarray(t_near, dtype=np.float64).reshape(-1))
    t1 = np.asarray(t_far, dtype=np.float64).reshape(-1)
    span = np.maximum(t1 - t0, 0.0)
    counts = np.floor(span / step + _COUNT_GUARD).astype(np.int64)
    return origins, dirs, t0, counts


def render_rays(field: VoxelField, origins, dirs, t_near, t_far, step, background,
                need_cache: bool = False):
    """March a batch of rays; returns (rgb (B, 3), t_final (B,), cache or None).

    Each ray i takes floor((t_far[i] - t_near[i]) / step) midpoint samples;
    a trailing interval shorter than the step is not sampled.
    """
    step = float(step)
    if step <= 0:
        raise FieldError("step must be positive")
    bg = np.ascontiguousarray(np.asarray(background, dtype=np.float64).reshape(3))
    origins, dirs, t0, counts = _ray_arrays(origins, dirs, t_near, t_far, step)
    b = origins.shape[0]
    out = np.empty((b, 3))
    t_final = np.empty(b)
    _forward_kernel(_packed_nodes(field), field.res, field.bbox.min_corner,
                    field.bbox.edge, origins, dirs, t0, counts, step, bg,
                    out, t_final)
    cache = MarchCache(origins, dirs, t0, counts, step, bg) if need_cache else None
    return out, t_final, cache


def render_rays_backward(field: VoxelField, cache: MarchCache, dl_drgb):
    """Gradients of sum(dl_drgb * rgb) w.r.t. density_raw and color nodes.

    dl_drgb is (B, 3); returns ((res, res, res), (res, res, res, 3)).
    The rectifier contributes subgradient 0 wherever raw <= 0. The cache must
    come from a render_rays call on the identical (unmutated) field.
    """
    res = field.res
    b = cache.origins.shape[0]
    g_rgb = np.ascontiguousarray(np.asarray(dl_drgb, dtype=np.float64).reshape(b, 3))
    d_packed = np.zeros((res ** 3, 4))
    max_count = int(cache.counts.max()) if b else 0
    scratch = np.empty((4, max(max_count, 1)))
    _backward_kernel(_packed_nodes(field), res, field.bbox.min_corner,
                     field.bbox.edge, cache.origins, cache.dirs, cache.t0,
                     cache.counts, cache.step, cache.background, g_rgb,
                     d_packed, scratch)
    d_density = d_packed[:, 0].reshape(res, res, res)
    d_color = np.ascontiguousarray(d_packed[:, 1:].reshape(res, res, res, 3))
    return d_density, d_color


def render_ray(field: VoxelField, ray: Ray, step: float | None = None,
               background=(1.0, 1.0, 1.0)):
    """March one ray; returns (rgb (3,), final transmittance)."""
    step = field.default_step if step is None else float(step)
    out, t_final, _ = render_rays(field, ray.origin[None], ray.direction[None],
                                  [ray.t_near], [ray.t_far], step, background)
    return out[0], float(t_final[0])


def render_ray_backward(field: VoxelField, ray: Ray, step: float | None,
                        background, dl_drgb):
    """Exact reverse-mode gradients of render_ray's rgb output.

    Returns dense (density_raw-shaped, color-shaped) gradient arrays; only
    nodes touched by the ray are nonzero.
    """
    step = field.default_step if step is None else float(step)
    _, _, cache = render_rays(field, ray.origin[None], ray.direction[None],
                              [ray.t_near], [ray.t_far], step, background,
                              need_cache=True)
    return render_rays_backward(field, cache, np.asarray(dl_drgb, dtype=np.float64)[None])


# ---------------------------------------------------------------------------
# Camera rays and image rendering
# ---------------------------------------------------------------------------

def box_spans(origins, dirs, bbox: Cube):
    """Entry/exit distances of rays against the box, clamped to t >= 0.

    Missing rays get zero-length spans (t0 == t1).
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    lo = bbox.min_corner
    hi = lo + bbox.edge
    d = np.where(np.abs(dirs) < 1e-300, 1e-300, dirs)
    ta = (lo - origins) / d
    tb = (hi - origins) / d
    tmin = np.minimum(ta, tb).max(axis=1)
    tmax = np.maximum(ta, tb).min(axis=1)
    t0 = np.maximum(tmin, 0.0)
    t1 = np.where(tmax > t0, tmax, t0)
    return t0, t1


def camera_rays(pose: CameraPose, bbox: Cube):
    """Pixel-center rays of a pinhole camera, clipped to the bounding box.

    Returns (origins (HW, 3), unit dirs (HW, 3), t0 (HW,), t1 (HW,)) in
    row-major pixel order.
    """
    w, h, f = pose.width, pose.height, pose.focal_px
    xs = (np.arange(w) + 0.5 - w / 2.0) / f
    ys = -(np.arange(h) + 0.5 - h / 2.0) / f
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    cam = np.stack([gx, gy, -np.ones_like(gx)], axis=-1).reshape(-1, 3)
    dirs = cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    t0, t1 = box_spans(origins, dirs, bbox)
    return origins, dirs, t0, t1


def render_image(field: VoxelField, pose: CameraPose, step: float | None = None,
                 background=(1.0, 1.0, 1.0)) -> ImageBuffer:
    """Render the camera view, one ray per pixel center, rays clipped to the box."""
    step = field.default_step if step is None else float(step)
    origins, dirs, t0, t1 = camera_rays(pose, field.bbox)
    out, _, _ = render_rays(field, origins, dirs, t0, t1, step, background)
    return ImageBuffer(np.clip(out, 0.0, 1.0).reshape(pose.height, pose.width, 3))


# ---------------------------------------------------------------------------
# Binary snapshots
# ---------------------------------------------------------------------------

MAGIC_FIELD = b"VXFD"
_HEADER = struct.Struct("<4sIII4d")  # magic, version, res, extra, bbox min xyz, edge
FORMAT_VERSION = 1


def _to_xfastest(arr: np.ndarray) -> np.ndarray:
    """Flatten (res, res, res[, c]) so the x index varies fastest."""
    if arr.ndim == 3:
        return arr.ravel(order="F")
    return arr.transpose(2, 1, 0, 3).reshape(-1, arr.shape[-1]).ravel()


def _from_xfastest(flat: np.ndarray, res: int, channels: int | None = None) -> np.ndarray:
    if channels is None:
        return flat.reshape((res, res, res), order="F")
    return flat.reshape(res, res, res, channels).transpose(2, 1, 0, 3)


def write_container(path, magic: bytes, res: int, bbox: Cube, arrays, extra: int = 0):
    """Shared snapshot container: header + little-endian float32 arrays (x fastest)."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, FORMAT_VERSION, res, extra,
                              float(bbox.min_corner[0]), float(bbox.min_corner[1]),
                              float(bbox.min_corner[2]), float(bbox.edge)))
        for arr in arrays:
            fh.write(_to_xfastest(arr).astype("<f4").tobytes())


def read_container(path, magic: bytes):
    """Returns (res, bbox, extra, flat float64 payload) after header validation."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FieldError(f"truncated snapshot: {path}")
    got_magic, version, res, extra, mx, my, mz, edge = _HEADER.unpack_from(blob)
    if got_magic != magic:
        raise FieldError(f"bad snapshot magic {got_magic!r} (expected {magic!r})")
    if version != FORMAT_VERSION:
        raise FieldError(f"unsupported snapshot version {version}")
    payload = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    return res, Cube(np.array([mx, my, mz]), edge), extra, payload


def save_field(field: VoxelField, path) -> None:
    write_container(path, MAGIC_FIELD, field.res, field.bbox,
                    [field.density_raw, field.color])


def load_field(path) -> VoxelField:
    res, bbox, _, payload = read_container(path, MAGIC_FIELD)
    n = res ** 3
    if payload.size != 4 * n:
        raise FieldError(f"snapshot payload has {payload.size} values, expected {4 * n}")
    density = _from_xfastest(payload[:n], res)
    color = _from_xfastest(payload[n:], res, channels=3)
    return VoxelField(bbox, density, np.clip(color, 0.0, 1.0))
