"""Command-line pipeline: synthesize scenes, run ensemble experiments, sweep noise."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass, fields as dc_fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (DatasetError, GroundTruthField, GT_SIDECAR_NAME, RenderConfig,
                      box, camera_rig, generate_synthetic_scene, load_dataset,
                      load_ground_truth, save_dataset, save_ground_truth, sphere)
from .ensemble import (EnsembleError, ensemble_stats, extract_grid, grid_summary,
                       grid_to_points, load_ensemble_grid, save_ensemble_grid,
                       save_grid, train_ensemble)
from .export import MetricsReport, write_histogram_csv, write_ply, write_report
from .field import FieldError, save_field
from .perturb import NoiseSpec, apply_noise, percent_of_circumference
from .postprocess import (PointSet, PostprocessError, artifact_metrics,
                          percentile_filter, robustness_compare,
                          uncertainty_histogram)
from .trainer import TrainConfig, TrainingDiverged, psnr as psnr_metric, per_view_psnr
from .dataset import ImageBuffer
from PIL import Image

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Resolved configuration of one pipeline run (config file + flag overrides)."""

    dataset: str
    out: str
    members: int = 10
    seed: int = 1
    grid_res: int = 64
    density_threshold: float = 15.0
    percentile: float = 90.0
    percentile_over_full_grid: bool = False
    surface_eps: float | None = None
    parallel_members: bool = False
    histogram_bins: int = 50
    steps: int = 2000
    rays_per_step: int = 1024
    lr: float = 0.12
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_lo: float = -1.0
    init_hi: float = 1.0
    field_res: int = 32
    step_size: float | None = None
    sigma_im: float = 0.0
    sigma_t: float = 0.0
    sigma_t_percent: float | None = None
    sigma_r_deg: float = 0.0
    noise_seed: int = 0

    @classmethod
    def load(cls, config_path=None, overrides=None) -> "RunConfig":
        known = {f.name for f in dc_fields(cls)}
        data: dict = {}
        if config_path is not None:
            try:
                raw = json.loads(Path(config_path).read_text())
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {config_path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"malformed config file: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError("config file must hold a JSON object")
            unknown = set(raw) - known
            if unknown:
                raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
            data.update(raw)
        for key, value in (overrides or {}).items():
            if key not in known:
                raise ConfigError(f"unknown config key: {key}")
            if value is not None:
                data[key] = value
        missing = {"dataset", "out"} - set(data)
        if missing:
            raise ConfigError(f"missing required config key(s): {sorted(missing)}")
        cfg = cls(**data)
        if cfg.members < 2:
            raise ConfigError("ensemble requires M >= 2")
        if not (0.0 < cfg.percentile <= 100.0):
            raise ConfigError("percentile must lie in (0, 100]")
        if cfg.grid_res < 2:
            raise ConfigError("grid_res must be >= 2")
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, rays_per_step=self.rays_per_step,
                           lr=self.lr, adam_beta1=self.adam_beta1,
                           adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
                           init_lo=self.init_lo, init_hi=self.init_hi,
                           seed=self.seed, field_res=self.field_res,
                           step_size=self.step_size)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

SCENE_PRESETS = {
    # one matte sphere
    "sphere": lambda: GroundTruthField((
        sphere((0.0, 0.0, 0.0), 0.2, 250.0, (0.8, 0.25, 0.2)),
    )),
    # sphere plus a thin plate occluder shadowing its +y side
    "sphere-occluder": lambda: GroundTruthField((
        sphere((0.0, 0.0, 0.0), 0.2, 250.0, (0.8, 0.25, 0.2)),
        box((0.0, 0.3, 0.0), (0.3, 0.012, 0.3), 250.0, (0.2, 0.35, 0.85)),
    )),
}


def cmd_synth(args) -> int:
    if args.preset not in SCENE_PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r} "
                          f"(choose from {sorted(SCENE_PRESETS)})")
    gt = SCENE_PRESETS[args.preset]()
    rig = camera_rig(args.rig, args.n, args.radius, args.look_at,
                     width=args.width, height=args.height,
                     camera_angle_x=math.radians(args.fov_deg))
    cfg = RenderConfig(gt_res=args.gt_res)
    dataset = generate_synthetic_scene(gt, rig, cfg)
    out = Path(args.out)
    save_dataset(dataset, out)
    save_ground_truth(gt, out / GT_SIDECAR_NAME)
    print(f"wrote {len(dataset.frames)} frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _rig_radius(dataset) -> float:
    center = dataset.scene_bbox.center
    dists = [float(np.linalg.norm(fr.pose.translation - center)) for fr in dataset.frames]
    return sum(dists) / len(dists)


def _ensemble_view_psnrs(members, dataset):
    """Per-view PSNR averaged over members; a per-view inf stays inf."""
    per_member = [per_view_psnr(f, dataset) for f in members]
    n_views = len(dataset.frames)
    out = []
    for v in range(n_views):
        vals = [pm[v] for pm in per_member]
        out.append(math.inf if any(math.isinf(x) for x in vals) else sum(vals) / len(vals))
    return out


def execute_run(cfg: RunConfig) -> MetricsReport:
    """Full pipeline: noise -> ensemble -> grids -> stats -> filter -> exports."""
    started = time.perf_counter()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "members").mkdir(exist_ok=True)
    (out / "grids").mkdir(exist_ok=True)

    dataset = load_dataset(cfg.dataset)
    gt_path = Path(cfg.dataset) / GT_SIDECAR_NAME
    gt = load_ground_truth(gt_path) if gt_path.exists() else None

    sigma_t = cfg.sigma_t
    if cfg.sigma_t_percent is not None:
        sigma_t = percent_of_circumference(cfg.sigma_t_percent, _rig_radius(dataset))
    spec = NoiseSpec(cfg.sigma_im, sigma_t, cfg.sigma_r_deg, cfg.noise_seed)
    train_ds = dataset if spec.is_zero else apply_noise(dataset, spec)

    members = train_ensemble(train_ds, cfg.train_config(), cfg.members,
                             parallel=cfg.parallel_members,
                             log_dir=out / "train_logs")
    outputs = {"train_logs": [f"train_logs/member_{m:02d}.csv" for m in range(cfg.members)]}
    for m, f in enumerate(members):
        rel = f"members/member_{m:02d}.vxf"
        save_field(f, out / rel)
        outputs.setdefault("members", []).append(rel)

    grids = []
    for m, f in enumerate(members):
        g = extract_grid(f, dataset.scene_bbox, cfg.grid_res)
        rel = f"grids/member_{m:02d}.dgrid"
        save_grid(g, out / rel)
        outputs.setdefault("member_grids", []).append(rel)
        grids.append(g)
    eg = ensemble_stats(grids)
    save_ensemble_grid(eg, out / "grids/ensemble.egrid")
    outputs["ensemble_grid"] = "grids/ensemble.egrid"

    full = grid_summary(eg)
    try:
        above = grid_summary(eg, mask=lambda mean, unc: mean > cfg.density_threshold)
    except EnsembleError:
        above = None

    points = grid_to_points(eg, cfg.density_threshold)
    if len(points) > 0:
        if cfg.percentile_over_full_grid:
            threshold = float(np.percentile(eg.uncertainty, cfg.percentile))
            keep = points.uncertainty <= threshold
            kept, removed = points.take(keep), points.take(~keep)
        else:
            kept, removed, threshold = percentile_filter(points, cfg.percentile)
    else:
        kept, removed, threshold = PointSet.empty(), PointSet.empty(), None

    write_ply(kept, out / "points_kept.ply", mode="binary_le")
    write_ply(removed, out / "points_removed.ply", mode="binary_le")
    outputs["points_kept"] = "points_kept.ply"
    outputs["points_removed"] = "points_removed.ply"

    if len(points) > 0:
        hist = uncertainty_histogram(points.uncertainty, cfg.histogram_bins)
        write_histogram_csv(hist, out / "histogram.csv")
        outputs["histogram"] = "histogram.csv"

    cell = dataset.scene_bbox.edge / (cfg.grid_res - 1)
    surface_eps = cfg.surface_eps if cfg.surface_eps is not None else 2.0 * cell
    artifacts = None
    robustness = None
    if gt is not None:
        artifacts = artifact_metrics(kept, removed, gt, surface_eps).as_dict()
        robustness = robustness_compare(grids, eg, cfg.density_threshold,
                                        gt, surface_eps).as_dict()

    views = _ensemble_view_psnrs(members, train_ds)
    finite = [v for v in views if math.isfinite(v)]
    mean_psnr_db = sum(finite) / len(finite) if finite else math.inf

    config_echo = cfg.as_dict()
    config_echo["sigma_t_resolved"] = sigma_t
    config_echo["surface_eps_resolved"] = surface_eps
    report = MetricsReport(
        per_view_psnr=views,
        mean_psnr=mean_psnr_db,
        excluded_inf_views=len(views) - len(finite),
        mU_delta=above.m_uncertainty if above else None,
        m_mean_delta=above.m_mean_density if above else None,
        point_counts={
            "grid_total": cfg.grid_res ** 3,
            "above_threshold": len(points),
            "kept": len(kept),
            "removed": len(removed),
        },
        config=config_echo,
        provenance={
            "version": __version__,
            "seed": cfg.seed,
            "noise_seed": cfg.noise_seed,
            "members": cfg.members,
            "grid_res": cfg.grid_res,
            "created_utc": datetime.now(timezone.utc).isoformat(),
            "elapsed_s": round(time.perf_counter() - started, 3),
        },
        baseline=spec.is_zero,
        summaries={
            "full": {"mU_delta": full.m_uncertainty,
                     "m_mean_delta": full.m_mean_density,
                     "count": full.count},
            "above_threshold": None if above is None else {
                "mU_delta": above.m_uncertainty,
                "m_mean_delta": above.m_mean_density,
                "count": above.count},
        },
        filter_stats={"percentile": cfg.percentile,
                      "uncertainty_threshold": threshold,
                      "over_full_grid": cfg.percentile_over_full_grid},
        artifacts=artifacts,
        robustness=robustness,
        outputs=outputs,
    )
    write_report(report, out / "report.json")
    return report


def cmd_run(args) -> int:
    overrides = _collect_overrides(args)
    cfg = RunConfig.load(args.config, overrides)
    try:
        report = execute_run(cfg)
    except Exception as exc:
        _write_error_record(Path(cfg.out), exc)
        raise
    print(f"mean PSNR {report.mean_psnr:.2f} dB | mU_delta {report.mU_delta} | "
          f"m_mean_delta {report.m_mean_delta:.4f} | report {Path(cfg.out) / 'report.json'}")
    return EXIT_OK


def _write_error_record(out: Path, exc: Exception) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(json.dumps({
            "error": type(exc).__name__,
            "message": str(exc),
        }, indent=2) + "\n")
    except OSError:
        pass  # the original error matters more


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_AXES = ("sigma_im", "sigma_t", "sigma_r", "sigma_tr")


def _sigma_t_fields(raw: str) -> dict:
    # translation values ending in % are percentages of the rig circumference
    if raw.endswith("%"):
        return {"sigma_t": 0.0, "sigma_t_percent": float(raw[:-1])}
    return {"sigma_t": float(raw), "sigma_t_percent": None}


def _apply_axis(cfg: RunConfig, axis: str, raw: str) -> RunConfig:
    if axis == "sigma_im":
        return replace(cfg, sigma_im=float(raw))
    if axis == "sigma_t":
        return replace(cfg, **_sigma_t_fields(raw))
    if axis == "sigma_r":
        return replace(cfg, sigma_r_deg=float(raw))
    if axis == "sigma_tr":
        try:
            t_part, r_part = raw.split(":")
        except ValueError as exc:
            raise ConfigError(f"sigma_tr values must look like T:R, got {raw!r}") from exc
        return replace(cfg, sigma_r_deg=float(r_part), **_sigma_t_fields(t_part))
    raise ConfigError(f"unknown sweep axis {axis!r}")


def cmd_sweep(args) -> int:
    overrides = _collect_overrides(args)
    base = RunConfig.load(args.config, overrides)
    if not args.values:
        raise ConfigError("sweep needs at least one value")
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for raw in args.values:
        tag = raw.replace(":", "_").replace("/", "_")
        sub_out = out / f"{args.axis}_{tag}"
        try:
            sub = _apply_axis(replace(base, out=str(sub_out)), args.axis, raw)
            rep = execute_run(sub)
            rows.append((raw, rep.mean_psnr, rep.mU_delta, rep.m_mean_delta, ""))
        except Exception as exc:  # failed rows carry the error, never partial numbers
            _write_error_record(sub_out, exc)
            rows.append((raw, None, None, None, f"{type(exc).__name__}: {exc}"))
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([args.axis, "mean_psnr", "mU_delta", "m_mean_delta", "error"])
        for raw, p, mu, md, err in rows:
            if err:
                writer.writerow([raw, "", "", "", err])
            else:
                writer.writerow([raw, p, mu, md, ""])
    print(f"wrote {len(rows)} sweep rows to {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# small standalone commands
# ---------------------------------------------------------------------------

def _load_png_image(path) -> ImageBuffer:
    with Image.open(path) as im:
        return ImageBuffer(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)


def cmd_psnr(args) -> int:
    value = psnr_metric(_load_png_image(args.image_a), _load_png_image(args.image_b))
    print("inf" if math.isinf(value) else f"{value:.6f}")
    return EXIT_OK


def cmd_filter(args) -> int:
    eg = load_ensemble_grid(args.ensemble_grid)
    points = grid_to_points(eg, args.density_threshold)
    if len(points) == 0:
        raise PostprocessError("no grid positions above the density threshold")
    if args.percentile_over_full_grid:
        threshold = float(np.percentile(eg.uncertainty, args.percentile))
        keep = points.uncertainty <= threshold
        kept, removed = points.take(keep), points.take(~keep)
    else:
        kept, removed, threshold = percentile_filter(points, args.percentile)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(kept, out / "points_kept.ply", mode=args.mode)
    write_ply(removed, out / "points_removed.ply", mode=args.mode)
    print(json.dumps({"total": len(points), "kept": len(kept), "removed": len(removed),
                      "uncertainty_threshold": threshold}))
    return EXIT_OK


def cmd_export_ply(args) -> int:
    eg = load_ensemble_grid(args.ensemble_grid)
    points = grid_to_points(eg, args.density_threshold)
    write_ply(points, args.out, mode=args.mode)
    print(f"wrote {len(points)} points to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

_OVERRIDE_FLAGS: list[tuple[str, type]] = [
    ("dataset", str), ("out", str), ("members", int), ("seed", int),
    ("grid_res", int), ("density_threshold", float), ("percentile", float),
    ("surface_eps", float), ("histogram_bins", int), ("steps", int),
    ("rays_per_step", int), ("lr", float), ("field_res", int),
    ("step_size", float), ("sigma_im", float), ("sigma_t", float),
    ("sigma_t_percent", float), ("sigma_r", float), ("noise_seed", int),
]
_FLAG_TO_KEY = {"sigma_r": "sigma_r_deg"}


def _add_run_flags(sub) -> None:
    sub.add_argument("--config", default=None, help="JSON config file")
    for name, typ in _OVERRIDE_FLAGS:
        sub.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None,
                         dest=name)
    sub.add_argument("--percentile-over-full-grid", action="store_true", default=None,
                     dest="percentile_over_full_grid")
    sub.add_argument("--parallel-members", action="store_true", default=None,
                     dest="parallel_members")


def _collect_overrides(args) -> dict:
    overrides = {}
    for name, _ in _OVERRIDE_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[_FLAG_TO_KEY.get(name, name)] = value
    for name in ("percentile_over_full_grid", "parallel_members"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return overrides


def _parse_vec3(text: str):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated numbers")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxens",
                                     description="Voxel radiance-field ensembles: "
                                                 "uncertainty, robustness, artifact removal")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--preset", default="sphere-occluder", help="scene preset")
    p.add_argument("--rig", default="full_sphere",
                   choices=("full_sphere", "upper_hemisphere", "one_sided_half_hemisphere"))
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--radius", type=float, default=0.88)
    p.add_argument("--look-at", type=_parse_vec3, default=[0.0, 0.0, 0.0], dest="look_at")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fov-deg", type=float, default=60.0, dest="fov_deg")
    p.add_argument("--gt-res", type=int, default=128, dest="gt_res")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run the full experiment pipeline")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one experiment per noise value")
    _add_run_flags(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", nargs="+", required=True,
                   help="axis values; sigma_tr values look like T:R")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("psnr", help="PSNR between two PNG images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.set_defaults(func=cmd_psnr)

    p = sub.add_parser("filter", help="percentile filter on a saved ensemble grid")
    p.add_argument("--ensemble-grid", required=True, dest="ensemble_grid")
    p.add_argument("--out", required=True)
    p.add_argument("--density-threshold", type=float, default=15.0, dest="density_threshold")
    p.add_argument("--percentile", type=float, default=90.0)
    p.add_argument("--percentile-over-full-grid", action="store_true",
                   dest="percentile_over_full_grid")
    p.add_argument("--mode", default="binary_le", choices=("ascii", "binary_le"))
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("export-ply", help="threshold a saved ensemble grid into a PLY")
    p.add_argument("--ensemble-grid", required=True, dest="ensemble_grid")
    p.add_argument("--out", required=True)
    p.add_argument("--density-threshold", type=float, default=15.0, dest="density_threshold")
    p.add_argument("--mode", default="binary_le", choices=("ascii", "binary_le"))
    p.set_defaults(func=cmd_export_ply)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, EnsembleError, PostprocessError,
            FieldError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
