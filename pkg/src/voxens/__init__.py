"""Voxel radiance-field ensembles: density uncertainty, robustness, artifact removal."""

__version__ = "0.1.0"

from .dataset import (CameraPose, Cube, Dataset, DatasetError, Frame,
                      GroundTruthField, ImageBuffer, Primitive, RenderConfig,
                      box, camera_rig, generate_synthetic_scene, gt_density_at,
                      load_dataset, load_ground_truth, save_dataset,
                      save_ground_truth, sphere)
from .ensemble import (DensityGrid, EnsembleError, EnsembleGrid, GridSummary,
                       ensemble_stats, extract_grid, grid_summary, grid_to_points,
                       load_ensemble_grid, load_grid, save_ensemble_grid, save_grid,
                       train_ensemble)
from .export import (MetricsReport, ReportError, read_ply, read_report,
                     write_histogram_csv, write_ply, write_report)
from .field import (FieldError, Ray, VoxelField, activate_density, load_field,
                    render_image, render_ray, render_ray_backward, render_rays,
                    render_rays_backward, sample_raw, save_field)
from .perturb import (NoiseSpec, apply_noise, percent_of_circumference,
                      perturb_images, perturb_rotation, perturb_translation)
from .postprocess import (ArtifactReport, Histogram, PointSet, PostprocessError,
                          RobustnessReport, artifact_metrics, classify_points,
                          percentile_filter, robustness_compare,
                          uncertainty_histogram)
from .trainer import (TrainConfig, TrainingDiverged, mean_psnr, mse,
                      per_view_psnr, psnr, train_member)
