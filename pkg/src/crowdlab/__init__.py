"""Desk-scale crowd counting lab: procedural crowds, SFCN, SE CycleGAN adaptation."""

from .config import ConfigError, TrainConfig, validate_config
from .dataset import CrowdDataset, MemoryDataset, generate_samples, write_dataset
from .labels import DensityMap, Split, density_from_dots, downsample_density, split_manifest
from .losses import LossWeights, SSIMConfig, ssim_index
from .metrics import EvalReport, count_errors, evaluate_model, iou, psnr
from .nets import SFCN, DAModels, DomainClassifier, PatchDiscriminator, ResnetGenerator, SpatialEncoder
from .regularizers import DensityBound, FilterRule, density_clip, fit_density_bound, scene_filter

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "TrainConfig", "validate_config",
    "CrowdDataset", "MemoryDataset", "generate_samples", "write_dataset",
    "DensityMap", "Split", "density_from_dots", "downsample_density", "split_manifest",
    "LossWeights", "SSIMConfig", "ssim_index",
    "EvalReport", "count_errors", "evaluate_model", "iou", "psnr",
    "SFCN", "DAModels", "DomainClassifier", "PatchDiscriminator", "ResnetGenerator", "SpatialEncoder",
    "DensityBound", "FilterRule", "density_clip", "fit_density_bound", "scene_filter",
]
