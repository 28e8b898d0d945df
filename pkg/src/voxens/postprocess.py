"""Uncertainty-driven filtering of reconstructed points and ground-truth scoring."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .dataset import GroundTruthField

if TYPE_CHECKING:
    from .ensemble import DensityGrid, EnsembleGrid


class PostprocessError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PointSet:
    """Reconstructed grid points with per-point mean density and uncertainty."""

    positions: np.ndarray    # (n, 3)
    density: np.ndarray      # (n,)
    uncertainty: np.ndarray  # (n,) >= 0
    rgb: np.ndarray | None = None  # (n, 3) in [0, 1], optional

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        den = np.asarray(self.density, dtype=np.float64).reshape(-1)
        unc = np.asarray(self.uncertainty, dtype=np.float64).reshape(-1)
        if not (pos.shape[0] == den.shape[0] == unc.shape[0]):
            raise PostprocessError("positions, density and uncertainty lengths differ")
        for name, arr in (("positions", pos), ("density", den), ("uncertainty", unc)):
            if not np.all(np.isfinite(arr)):
                raise PostprocessError(f"{name} must be finite")
        if unc.size and float(unc.min()) < 0.0:
            raise PostprocessError("uncertainty must be >= 0")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "density", den)
        object.__setattr__(self, "uncertainty", unc)
        if self.rgb is not None:
            rgb = np.asarray(self.rgb, dtype=np.float64).reshape(-1, 3)
            if rgb.shape[0] != pos.shape[0]:
                raise PostprocessError("rgb length differs from positions")
            object.__setattr__(self, "rgb", rgb)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "PointSet":
        return cls(np.empty((0, 3)), np.empty(0), np.empty(0))

    def take(self, mask) -> "PointSet":
        rgb = self.rgb[mask] if self.rgb is not None else None
        return PointSet(self.positions[mask], self.density[mask],
                        self.uncertainty[mask], rgb)


def percentile_filter(ps: PointSet, p: float):
    """Split points at the p-th percentile of uncertainty.

    The threshold interpolates linearly between closest ranks (rank position
    (n - 1) * p / 100). Kept points satisfy uncertainty <= threshold, so ties
    are kept. Returns (kept, removed, threshold).
    """
    n = len(ps)
    if n == 0:
        raise PostprocessError("empty point set")
    if not (0.0 < p <= 100.0):
        raise PostprocessError("percentile must lie in (0, 100]")
    threshold = float(np.percentile(ps.uncertainty, p))
    keep = ps.uncertainty <= threshold
    return ps.take(keep), ps.take(~keep), threshold


@dataclass(frozen=True, eq=False)
class Histogram:
    """Equal-width histogram; the final edge is inclusive."""

    bin_edges: np.ndarray  # (bins + 1,) ascending
    counts: np.ndarray     # (bins,) non-negative ints

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64).reshape(-1)
        counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if edges.size != counts.size + 1:
            raise PostprocessError("need len(bin_edges) == len(counts) + 1")
        if np.any(np.diff(edges) <= 0):
            raise PostprocessError("bin edges must be strictly ascending")
        if counts.size and int(counts.min()) < 0:
            raise PostprocessError("counts must be non-negative")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)


def uncertainty_histogram(values, bins: int, value_range=None) -> Histogram:
    """Histogram of uncertainty values over equal-width bins.

    value_range defaults to (min, max) of the input.
    """
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise PostprocessError("empty input")
    if bins < 1:
        raise PostprocessError("bins must be >= 1")
    counts, edges = np.histogram(vals, bins=bins, range=value_range)
    return Histogram(edges, counts)


# ---------------------------------------------------------------------------
# Ground-truth based scoring
# ---------------------------------------------------------------------------

def classify_points(positions, gt: GroundTruthField, surface_eps: float):
    """Label points by analytic distance to the ground-truth primitives.

    surface: within surface_eps of some primitive boundary.
    artifact: farther than surface_eps outside every primitive (empty space).
    interior: deeper than surface_eps inside some primitive.
    Returns three boolean masks (surface, artifact, interior).
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = pos.shape[0]
    if n == 0:
        z = np.zeros(0, dtype=bool)
        return z, z.copy(), z.copy()
    d = gt.signed_distances(pos)
    if d.shape[1] == 0:
        surface = np.zeros(n, dtype=bool)
        artifact = np.ones(n, dtype=bool)
        return surface, artifact, np.zeros(n, dtype=bool)
    min_abs = np.abs(d).min(axis=1)
    min_sd = d.min(axis=1)
    surface = min_abs <= surface_eps
    artifact = ~surface & (min_sd > surface_eps)
    interior = ~surface & ~artifact
    return surface, artifact, interior


@dataclass(frozen=True)
class ArtifactReport:
    """Efficacy of one percentile filtering run against the analytic scene."""

    surface_eps: float
    kept_total: int
    removed_total: int
    kept_artifacts: int
    removed_artifacts: int
    kept_surface: int
    removed_surface: int
    artifact_fraction_kept: float
    artifact_fraction_removed: float | None
    surface_recall_kept: float | None
    enrichment_ratio: float | None  # None means "n/a"

    def as_dict(self) -> dict:
        return {
            "surface_eps": self.surface_eps,
            "kept_total": self.kept_total,
            "removed_total": self.removed_total,
            "kept_artifacts": self.kept_artifacts,
            "removed_artifacts": self.removed_artifacts,
            "kept_surface": self.kept_surface,
            "removed_surface": self.removed_surface,
            "artifact_fraction_kept": self.artifact_fraction_kept,
            "artifact_fraction_removed": self.artifact_fraction_removed,
            "surface_recall_kept": self.surface_recall_kept,
            "enrichment_ratio": self.enrichment_ratio,
        }


def artifact_metrics(kept: PointSet, removed: PointSet, gt: GroundTruthField,
                     surface_eps: float) -> ArtifactReport:
    """Score a kept/removed split against the analytic ground truth.

    enrichment_ratio = (artifact fraction among removed) / (among kept);
    None ("n/a") when removed is empty or the ratio is 0/0.
    """
    if surface_eps <= 0:
        raise PostprocessError("surface_eps must be positive")
    ks, ka, _ = classify_points(kept.positions, gt, surface_eps)
    rs, ra, _ = classify_points(removed.positions, gt, surface_eps)
    kept_surface, kept_art = int(ks.sum()), int(ka.sum())
    rem_surface, rem_art = int(rs.sum()), int(ra.sum())
    kept_total, rem_total = len(kept), len(removed)

    frac_kept = kept_art / kept_total if kept_total else 0.0
    frac_removed = rem_art / rem_total if rem_total else None
    total_surface = kept_surface + rem_surface
    recall = kept_surface / total_surface if total_surface else None
    if frac_removed is None:
        enrichment = None
    elif frac_kept == 0.0:
        enrichment = math.inf if frac_removed > 0 else None
    else:
        enrichment = frac_removed / frac_kept
    return ArtifactReport(surface_eps, kept_total, rem_total, kept_art, rem_art,
                          kept_surface, rem_surface, frac_kept, frac_removed,
                          recall, enrichment)


@dataclass(frozen=True)
class RobustnessReport:
    """Artifact counts per member grid vs the ensemble mean grid."""

    density_threshold: float
    surface_eps: float
    member_point_counts: list[int]
    member_artifact_counts: list[int]
    ensemble_point_count: int
    ensemble_artifact_count: int

    def as_dict(self) -> dict:
        return {
            "density_threshold": self.density_threshold,
            "surface_eps": self.surface_eps,
            "member_point_counts": list(self.member_point_counts),
            "member_artifact_counts": list(self.member_artifact_counts),
            "ensemble_point_count": self.ensemble_point_count,
            "ensemble_artifact_count": self.ensemble_artifact_count,
        }


def robustness_compare(member_grids, ensemble_grid, density_threshold: float,
                       gt: GroundTruthField, surface_eps: float) -> RobustnessReport:
    """Compare thresholded member grids against the thresholded ensemble mean."""
    if len(member_grids) < 2:
        raise PostprocessError("need at least 2 member grids")
    if surface_eps <= 0:
        raise PostprocessError("surface_eps must be positive")
    lattice = ensemble_grid.bbox.lattice(ensemble_grid.res)
    for g in member_grids:
        if g.values.shape != ensemble_grid.mean.shape or g.bbox != ensemble_grid.bbox:
            raise PostprocessError("member grids must match the ensemble grid")

    def count(values):
        pts = lattice[values > density_threshold]
        _, artifact, _ = classify_points(pts, gt, surface_eps)
        return pts.shape[0], int(artifact.sum())

    member_pts, member_art = zip(*(count(g.values) for g in member_grids))
    ens_pts, ens_art = count(ensemble_grid.mean)
    return RobustnessReport(float(density_threshold), float(surface_eps),
                            list(member_pts), list(member_art), ens_pts, ens_art)
