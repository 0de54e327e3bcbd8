"""Reference-based sketch colorization with separated reference representations."""

__version__ = "0.1.0"

from .backbone import ModelConfig
from .checkpoint import Checkpoint, ProvenanceError, ScheduleConfig
from .core_math import (
    GuidanceConfig,
    NoiseSchedule,
    cfg_combine,
    diffuse,
    diffusion_loss,
    make_noise_schedule,
    prior_noise_estimate,
    sample,
)
from .datagen import ImageTriple, TPSParams, extract_sketch, generate_triples, tps_warp
from .estimator import ReferenceColorizer, SketchExtractor, TPSWarper
from .inference import InferenceRequest, MissingMaskError, colorize, colorize_batch
from .injection import Thresholds
from .metrics import embed_cosine, entanglement_score, ms_ssim, psnr
from .model import ColorizationModel
from .training import StageConfig, run_stage, stage_config

__all__ = [
    "Checkpoint",
    "ColorizationModel",
    "GuidanceConfig",
    "ImageTriple",
    "InferenceRequest",
    "MissingMaskError",
    "ModelConfig",
    "NoiseSchedule",
    "ProvenanceError",
    "ReferenceColorizer",
    "ScheduleConfig",
    "SketchExtractor",
    "StageConfig",
    "TPSParams",
    "TPSWarper",
    "Thresholds",
    "cfg_combine",
    "colorize",
    "colorize_batch",
    "diffuse",
    "diffusion_loss",
    "embed_cosine",
    "entanglement_score",
    "extract_sketch",
    "generate_triples",
    "make_noise_schedule",
    "ms_ssim",
    "prior_noise_estimate",
    "psnr",
    "run_stage",
    "sample",
    "stage_config",
    "tps_warp",
]
