"""Depth completion from sparse measurements and a color image.

A generative completion pipeline built on a small numpy autodiff core:
a guidance extractor fuses image and sparse-depth features through
deformable attention, a conditional denoiser turns seeded noise into a
dense depth latent, and a propagation refiner snaps the result back
onto the measurements.  Everything is deterministic given a seed.
"""

from .data import (DepthMap, Manifest, ManifestEntry, SceneSample,
                   decode_depth_png, decode_image_png, encode_depth_png,
                   encode_image_png, load_manifest, load_sample,
                   nearest_valid_fill, sparsify, synth_scene, write_manifest)
from .diffusion import (NoiseSchedule, build_schedule, ddim_step,
                        denormalize_depth, diffusion_loss, forward_diffuse,
                        normalize_depth, posterior_mean, sample, step_grid)
from .denoiser import Denoiser, DenoiserConfig, timestep_embedding
from .errors import (ConfigError, DataError, DepthfillError, DimensionError,
                     FormatError, NumericError, UsageError)
from .gradcheck import GradReport, grad_check, run_suite
from .guidance import GuidanceConfig, GuidanceExtractor, GuidanceFeatures
from .refiner import (RefineConfig, RefinementParams, Refiner, anchor_sparse,
                      propagate_step, refine_with_params)
from .rng import stream, stream_key
from .tensor import Tensor, no_grad, set_default_dtype
from .train import (AdamW, CompletionModel, EpochStats, Metrics, ModelConfig,
                    TrainConfig, aggregate_metrics, compute_metrics, evaluate,
                    load_checkpoint, load_model, lr_at, map_loss,
                    save_checkpoint, save_model, train, write_metrics_csv)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "CompletionModel", "ConfigError", "DataError", "Denoiser",
    "DenoiserConfig", "DepthMap", "DepthfillError", "DimensionError",
    "EpochStats", "FormatError", "GradReport", "GuidanceConfig",
    "GuidanceExtractor", "GuidanceFeatures", "Manifest", "ManifestEntry",
    "Metrics", "ModelConfig", "NoiseSchedule", "NumericError", "RefineConfig",
    "RefinementParams", "Refiner", "SceneSample", "Tensor", "TrainConfig",
    "UsageError", "aggregate_metrics", "anchor_sparse", "build_schedule",
    "compute_metrics",
    "ddim_step", "decode_depth_png", "decode_image_png", "denormalize_depth",
    "diffusion_loss", "encode_depth_png", "encode_image_png", "evaluate",
    "forward_diffuse", "grad_check", "load_checkpoint", "load_manifest",
    "load_model", "load_sample", "lr_at", "map_loss", "nearest_valid_fill",
    "no_grad", "normalize_depth", "posterior_mean", "propagate_step",
    "refine_with_params", "run_suite", "sample", "save_checkpoint",
    "save_model", "set_default_dtype", "sparsify", "step_grid", "stream",
    "stream_key", "synth_scene", "timestep_embedding", "train",
    "write_manifest", "write_metrics_csv",
]
