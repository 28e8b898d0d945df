"""Fit one voxel field to posed images with Adam on photometric MSE; PSNR metrics."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import field as field_mod
from .dataset import Dataset, ImageBuffer

_MASK64 = (1 << 64) - 1


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, initialization and lattice settings for one ensemble member."""

    steps: int = 2000
    rays_per_step: int = 1024
    lr: float = 0.12
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_lo: float = -1.0
    init_hi: float = 1.0
    seed: int = 0
    field_res: int = 32            # voxel lattice nodes per axis
    step_size: float | None = None  # ray-march step; None = field default
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.rays_per_step < 1:
            raise ValueError("rays_per_step must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.init_lo > self.init_hi:
            raise ValueError("init_lo must be <= init_hi")
        if self.field_res < 2:
            raise ValueError("field_res must be >= 2")


def _batch_rng(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _flatten_frames(dataset: Dataset):
    """Per-pixel rays and targets for every frame, concatenated."""
    origins, dirs, t0s, t1s, targets = [], [], [], [], []
    for fr in dataset.frames:
        o, d, t0, t1 = field_mod.camera_rays(fr.pose, dataset.scene_bbox)
        origins.append(o)
        dirs.append(d)
        t0s.append(t0)
        t1s.append(t1)
        targets.append(fr.image.pixels.reshape(-1, 3))
    return (np.concatenate(origins), np.concatenate(dirs),
            np.concatenate(t0s), np.concatenate(t1s), np.concatenate(targets))


def train_member(dataset: Dataset, cfg: TrainConfig, log_path=None) -> field_mod.VoxelField:
    """Train one randomly-initialized member on the given (possibly noisy) data.

    Raw density starts i.i.d. uniform in [init_lo, init_hi] from cfg.seed,
    colors start at 0.5. Each step draws rays_per_step (frame, pixel) pairs
    uniformly and takes one Adam step on the mean squared photometric error
    in the [0, 1] domain. Deterministic for a fixed seed (single-threaded).
    """
    if len(dataset.frames) == 0:
        raise ValueError("dataset has no frames")
    res = cfg.field_res
    init_rng = _batch_rng(cfg.seed, 0)
    density = init_rng.uniform(cfg.init_lo, cfg.init_hi, size=(res, res, res))
    color = np.full((res, res, res, 3), 0.5)
    field = field_mod.VoxelField(dataset.scene_bbox, density, color)
    step = cfg.step_size if cfg.step_size is not None else field.default_step

    origins, dirs, t0, t1, targets = _flatten_frames(dataset)
    n_pix = targets.shape[0]
    bg = dataset.background

    m_d = np.zeros_like(field.density_raw)
    v_d = np.zeros_like(field.density_raw)
    m_c = np.zeros_like(field.color)
    v_c = np.zeros_like(field.color)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2

    log_rows = []
    started = time.perf_counter()
    for s in range(cfg.steps):
        pick = _batch_rng(cfg.seed, s + 1).integers(0, n_pix, size=cfg.rays_per_step)
        colors, _, cache = field_mod.render_rays(field, origins[pick], dirs[pick],
                                                 t0[pick], t1[pick], step, bg,
                                                 need_cache=True)
        resid = colors - targets[pick]
        loss = float(np.mean(resid * resid))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {s}")
        g_rgb = (2.0 / resid.size) * resid
        g_d, g_c = field_mod.render_rays_backward(field, cache, g_rgb)

        t_adam = s + 1
        corr1 = 1.0 - b1 ** t_adam
        corr2 = 1.0 - b2 ** t_adam
        for param, grad, m, v in ((field.density_raw, g_d, m_d, v_d),
                                  (field.color, g_c, m_c, v_c)):
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            param -= cfg.lr * (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_eps)
        np.clip(field.color, 0.0, 1.0, out=field.color)

        if log_path is not None and (s % cfg.log_every == 0 or s == cfg.steps - 1):
            log_rows.append((s, loss, (time.perf_counter() - started) * 1000.0))

    if log_path is not None:
        path = Path(log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "wall_ms"])
            writer.writerows(log_rows)
    return field


# ---------------------------------------------------------------------------
# Image metrics (8-bit domain, peak value 255)
# ---------------------------------------------------------------------------

def mse(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean squared error over pixels and channels, computed in the 8-bit domain."""
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError("image dimension mismatch")
    diff = (a.pixels - b.pixels) * 255.0
    return float(np.mean(diff * diff))


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / m)


def per_view_psnr(field, dataset: Dataset, step: float | None = None) -> list[float]:
    return [psnr(field_mod.render_image(field, fr.pose, step=step,
                                        background=dataset.background), fr.image)
            for fr in dataset.frames]


def mean_psnr(field, dataset: Dataset, step: float | None = None) -> float:
    """Mean per-view PSNR, excluding infinite (zero-error) views.

    Returns +inf when every view is perfect.
    """
    vals = per_view_psnr(field, dataset, step=step)
    finite = [v for v in vals if math.isfinite(v)]
    if not finite:
        return math.inf
    return sum(finite) / len(finite)
