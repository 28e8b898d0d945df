"""Ensembles of independently trained fields and their per-position statistics."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import field as field_mod
from .dataset import Cube, Dataset
from .postprocess import PointSet
from .trainer import TrainConfig, TrainingDiverged, train_member

MAGIC_GRID = b"DGRD"
MAGIC_ENSEMBLE = b"EGRD"


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Raw density of one member sampled on a node-aligned lattice.

    values[i, j, k] indexes (x, y, z); serialized order is x fastest.
    """

    bbox: Cube
    values: np.ndarray  # (res, res, res)

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        shp = vals.shape
        if len(shp) != 3 or len(set(shp)) != 1 or shp[0] < 2:
            raise EnsembleError(f"values must be cubic with res >= 2, got {shp}")
        if not np.all(np.isfinite(vals)):
            raise EnsembleError("grid values must be finite")
        object.__setattr__(self, "values", vals)

    @property
    def res(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class EnsembleGrid:
    """Per-position mean and uncertainty of member densities on one lattice."""

    bbox: Cube
    mean: np.ndarray         # (res, res, res)
    uncertainty: np.ndarray  # (res, res, res) >= 0
    members: int

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        unc = np.ascontiguousarray(self.uncertainty, dtype=np.float64)
        if mean.shape != unc.shape or mean.ndim != 3 or mean.shape[0] < 2:
            raise EnsembleError(f"bad grid shapes: {mean.shape} vs {unc.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(unc))):
            raise EnsembleError("grid values must be finite")
        if float(unc.min()) < 0.0:
            raise EnsembleError("uncertainty must be >= 0 everywhere")
        if self.members < 2:
            raise EnsembleError("ensemble requires M >= 2")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "uncertainty", unc)
        object.__setattr__(self, "members", int(self.members))

    @property
    def res(self) -> int:
        return self.mean.shape[0]


def train_ensemble(dataset: Dataset, cfg: TrainConfig, members: int, *,
                   parallel: bool = False, seeds: Sequence[int] | None = None,
                   log_dir=None) -> list[field_mod.VoxelField]:
    """Train M members with per-member derived seeds (cfg.seed + m by default).

    seeds overrides the derivation (testing hook). Members may train
    concurrently; outputs are in member-index order either way, and each
    member is bit-deterministic on its own.
    """
    if members < 2:
        raise EnsembleError("ensemble requires M >= 2")
    if seeds is None:
        seeds = [cfg.seed + m for m in range(members)]
    if len(seeds) != members:
        raise EnsembleError(f"got {len(seeds)} seeds for {members} members")
    configs = [replace(cfg, seed=int(s)) for s in seeds]

    def run(m: int):
        log_path = None
        if log_dir is not None:
            log_path = os.path.join(str(log_dir), f"member_{m:02d}.csv")
        try:
            return train_member(dataset, configs[m], log_path=log_path)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"member {m}: {exc}") from exc

    if parallel:
        workers = min(members, os.cpu_count() or 1)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run, m) for m in range(members)]
            return [f.result() for f in futures]
    return [run(m) for m in range(members)]


def extract_grid(field: field_mod.VoxelField, bbox: Cube, res: int) -> DensityGrid:
    """Sample raw density on a node-aligned, boundary-inclusive lattice."""
    if res < 2:
        raise EnsembleError("grid res must be >= 2")
    pts = bbox.lattice(res).reshape(-1, 3)
    vals = field_mod.sample_raw(field, pts).reshape(res, res, res)
    return DensityGrid(bbox, vals)


def ensemble_stats(grids: Sequence[DensityGrid]) -> EnsembleGrid:
    """Per-position mean and Bessel-corrected (M - 1) sample stddev across members.

    Two-pass computation: the mean is formed first, deviations second, which
    keeps cancellation error at the 1e-12 oracle scale.
    """
    if len(grids) < 2:
        raise EnsembleError("ensemble statistics need at least 2 grids")
    first = grids[0]
    for g in grids[1:]:
        if g.res != first.res or g.bbox != first.bbox:
            raise EnsembleError("member grids must share bbox and res")
    stack = np.stack([g.values for g in grids])
    mean = stack.mean(axis=0)
    dev = stack - mean
    unc = np.sqrt((dev * dev).sum(axis=0) / (len(grids) - 1))
    return EnsembleGrid(first.bbox, mean, unc, members=len(grids))


class GridSummary(NamedTuple):
    m_uncertainty: float
    m_mean_density: float
    count: int


def grid_summary(eg: EnsembleGrid,
                 mask: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
                 ) -> GridSummary:
    """Average uncertainty and mean density over selected positions.

    mask(mean, uncertainty) returns a boolean selection; default is all
    positions.
    """
    if mask is None:
        sel = np.ones(eg.mean.shape, dtype=bool)
    else:
        sel = np.asarray(mask(eg.mean, eg.uncertainty), dtype=bool)
        if sel.shape != eg.mean.shape:
            raise EnsembleError("mask must return one flag per grid position")
    n = int(sel.sum())
    if n == 0:
        raise EnsembleError("no positions selected")
    return GridSummary(float(eg.uncertainty[sel].mean()),
                       float(eg.mean[sel].mean()), n)


def grid_to_points(eg: EnsembleGrid, density_threshold: float) -> PointSet:
    """World-space points for every position with mean density above threshold."""
    sel = eg.mean > density_threshold
    pts = eg.bbox.lattice(eg.res)[sel]
    return PointSet(pts, eg.mean[sel], eg.uncertainty[sel])


# ---------------------------------------------------------------------------
# Snapshots (same binary container as fields, distinct magics)
# ---------------------------------------------------------------------------

def save_grid(grid: DensityGrid, path) -> None:
    field_mod.write_container(path, MAGIC_GRID, grid.res, grid.bbox, [grid.values])


def load_grid(path) -> DensityGrid:
    res, bbox, _, payload = field_mod.read_container(path, MAGIC_GRID)
    if payload.size != res ** 3:
        raise EnsembleError(f"grid payload has {payload.size} values, expected {res ** 3}")
    return DensityGrid(bbox, field_mod._from_xfastest(payload, res))


def save_ensemble_grid(eg: EnsembleGrid, path) -> None:
    field_mod.write_container(path, MAGIC_ENSEMBLE, eg.res, eg.bbox,
                              [eg.mean, eg.uncertainty], extra=eg.members)


def load_ensemble_grid(path) -> EnsembleGrid:
    res, bbox, members, payload = field_mod.read_container(path, MAGIC_ENSEMBLE)
    n = res ** 3
    if payload.size != 2 * n:
        raise EnsembleError(f"ensemble payload has {payload.size} values, expected {2 * n}")
    mean = field_mod._from_xfastest(payload[:n], res)
    unc = np.maximum(field_mod._from_xfastest(payload[n:], res), 0.0)
    return EnsembleGrid(bbox, mean, unc, members=members)
