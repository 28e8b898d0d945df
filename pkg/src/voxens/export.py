"""Persistence of results: PLY point clouds, histogram CSV, run reports."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np

from .postprocess import Histogram, PointSet

SCHEMA_VERSION = 1

# Report fields that must be present when reading a report back.
_REQUIRED = ("schema_version", "per_view_psnr", "mean_psnr", "excluded_inf_views",
             "mU_delta", "m_mean_delta", "point_counts", "config", "provenance",
             "baseline")
# Subtrees that hold free-form values and are never inf-decoded.
_OPAQUE = ("config", "provenance", "outputs")


class ReportError(ValueError):
    pass


@dataclass
class MetricsReport:
    """One experiment row, complete enough to regenerate the run.

    mU_delta and m_mean_delta are the mean density uncertainty and mean
    density over grid positions whose mean density exceeds the run's
    threshold (rendering-relevant structure). The unmasked counterparts are
    carried under summaries["full"].
    """

    per_view_psnr: list
    mean_psnr: float
    excluded_inf_views: int
    mU_delta: float | None
    m_mean_delta: float | None
    point_counts: dict
    config: dict
    provenance: dict
    baseline: bool = False
    summaries: dict = dc_field(default_factory=dict)
    filter_stats: dict = dc_field(default_factory=dict)
    artifacts: dict | None = None
    robustness: dict | None = None
    outputs: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        counts = self.point_counts
        need = ("grid_total", "above_threshold", "kept", "removed")
        if any(k not in counts for k in need):
            raise ReportError(f"point_counts must contain {need}")
        if counts["kept"] + counts["removed"] != counts["above_threshold"]:
            raise ReportError("point_counts inconsistent: kept + removed != above_threshold")


def _encode(value):
    """Recursively encode for JSON; non-finite floats become sentinel strings."""
    if isinstance(value, dict):
        return {k: _encode(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            raise ReportError("NaN is not representable in reports")
    return value


def _decode(value):
    if isinstance(value, dict):
        return {k: _decode(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode(v) for v in value]
    if value == "inf":
        return math.inf
    if value == "-inf":
        return -math.inf
    return value


def write_report(report: MetricsReport, path) -> None:
    """Serialize the report as one deterministic JSON object.

    Infinite PSNR values are stored as the string "inf". Two writes of the
    same report are byte-identical.
    """
    doc = {"schema_version": SCHEMA_VERSION, **asdict(report)}
    text = json.dumps(_encode(doc), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def read_report(path) -> MetricsReport:
    """Inverse of write_report; unknown extra fields are ignored with a warning."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ReportError(f"malformed report: {exc}") from exc
    if not isinstance(doc, dict):
        raise ReportError("malformed report: top level is not an object")
    for name in _REQUIRED:
        if name not in doc:
            raise ReportError(f"missing required field: {name}")
    version = doc["schema_version"]
    if version != SCHEMA_VERSION:
        raise ReportError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")

    known = set(MetricsReport.__dataclass_fields__)
    unknown = set(doc) - known - {"schema_version"}
    if unknown:
        warnings.warn(f"ignoring unknown report field(s): {sorted(unknown)}")
    kwargs = {}
    for name in known:
        if name not in doc:
            if name in _REQUIRED:
                raise ReportError(f"missing required field: {name}")
            continue
        value = doc[name]
        kwargs[name] = value if name in _OPAQUE else _decode(value)
    return MetricsReport(**kwargs)


# ---------------------------------------------------------------------------
# PLY point clouds
# ---------------------------------------------------------------------------

def write_ply(ps: PointSet, path, mode: str = "binary_le") -> None:
    """Write a PLY 1.0 point cloud with density and uncertainty properties.

    mode is "ascii" or "binary_le". Values are float32; optional colors are
    8-bit uchar.
    """
    if mode not in ("ascii", "binary_le"):
        raise ValueError(f"unknown PLY mode {mode!r}")
    n = len(ps)
    has_rgb = ps.rgb is not None
    fmt = "ascii" if mode == "ascii" else "binary_little_endian"
    header = [
        "ply",
        f"format {fmt} 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property float density",
        "property float uncertainty",
    ]
    if has_rgb:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")

    floats = np.column_stack([ps.positions, ps.density, ps.uncertainty]).astype("<f4")
    rgb8 = np.clip(np.round(ps.rgb * 255.0), 0, 255).astype(np.uint8) if has_rgb else None

    if mode == "ascii":
        lines = []
        for i in range(n):
            parts = [f"{v:.9g}" for v in floats[i]]
            if has_rgb:
                parts += [str(int(v)) for v in rgb8[i]]
            lines.append(" ".join(parts))
        Path(path).write_text("\n".join(header + lines) + "\n")
        return

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if has_rgb:
            rec = np.dtype([("v", "<f4", 5), ("c", "u1", 3)])
            data = np.empty(n, dtype=rec)
            data["v"] = floats
            data["c"] = rgb8
            fh.write(data.tobytes())
        else:
            fh.write(floats.tobytes())


_PLY_BASE = ("x", "y", "z", "density", "uncertainty")


def read_ply(path) -> PointSet:
    """Parse a PLY file written by write_ply (either mode)."""
    blob = Path(path).read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise ValueError(f"not a PLY file: {path}")
    header = blob[:end].decode("ascii").splitlines()
    body = blob[end + len(b"end_header\n"):]

    fmt = None
    n = 0
    props = []
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element" and tok[1] == "vertex":
            n = int(tok[2])
        elif tok[0] == "property":
            props.append((tok[1], tok[2]))
    names = tuple(name for _, name in props)
    if names[:5] != _PLY_BASE:
        raise ValueError(f"unsupported PLY layout: {names}")
    has_rgb = names[5:] == ("red", "green", "blue")

    if fmt == "ascii":
        rows = [line.split() for line in body.decode("ascii").splitlines() if line.strip()]
        if len(rows) != n:
            raise ValueError(f"expected {n} vertices, found {len(rows)}")
        data = np.asarray(rows, dtype=np.float64) if n else np.empty((0, len(props)))
        # values were written from float32 with 9 significant digits; snapping
        # back to float32 recovers them exactly
        floats = data[:, :5].astype("<f4").astype(np.float64) if n else np.empty((0, 5))
        rgb = data[:, 5:8] / 255.0 if (has_rgb and n) else (np.empty((0, 3)) if has_rgb else None)
    elif fmt == "binary_little_endian":
        if has_rgb:
            rec = np.dtype([("v", "<f4", 5), ("c", "u1", 3)])
            data = np.frombuffer(body, dtype=rec, count=n)
            floats = data["v"].astype(np.float64)
            rgb = data["c"].astype(np.float64) / 255.0
        else:
            floats = np.frombuffer(body, dtype="<f4", count=5 * n).astype(np.float64)
            floats = floats.reshape(n, 5)
            rgb = None
    else:
        raise ValueError(f"unsupported PLY format {fmt!r}")
    return PointSet(floats[:, :3], floats[:, 3], floats[:, 4], rgb)


def write_histogram_csv(hist: Histogram, path) -> None:
    """Histogram rows as bin_lo,bin_hi,count with a header line."""
    lines = ["bin_lo,bin_hi,count"]
    for i, count in enumerate(hist.counts):
        lines.append(f"{float(hist.bin_edges[i])!r},{float(hist.bin_edges[i + 1])!r},{int(count)}")
    Path(path).write_text("\n".join(lines) + "\n")
