"""Music-driven image animation with a two-stage latent diffusion model.

Stage 1 learns single-frame denoising conditioned on a reference image,
a pose-mask residual, and a caption.  Stage 2 freezes the spatial model
and trains temporal modules that attend over music features, a per-frame
beat vector, and motion context from previously generated frames.
"""

from .audio import Waveform, load_wav, save_wav
from .conditioning import extract_beats, quantize_beat_times
from .dataset import ClipSpec, build_dataset, load_clips
from .diffusion import NoiseSchedule, ddim_sample, denoising_loss, make_schedule
from .metrics import (beat_alignment_score, frechet_feature_distance, psnr, ssim,
                      video_features)
from .network import (AnimationModel, ModelConfig, extend_to_stage2,
                      load_checkpoint, save_checkpoint)
from .training import (GenerateConfig, TrainConfig, generate_video,
                       parse_train_config, train_stage1, train_stage2)

__version__ = "0.1.0"

__all__ = [
    "AnimationModel", "ClipSpec", "GenerateConfig",
    "ModelConfig", "NoiseSchedule", "TrainConfig", "Waveform",
    "beat_alignment_score",
    "build_dataset", "ddim_sample", "denoising_loss", "extend_to_stage2",
    "extract_beats", "frechet_feature_distance", "generate_video",
    "load_checkpoint", "load_clips", "load_wav", "make_schedule",
    "parse_train_config", "psnr", "quantize_beat_times", "save_checkpoint",
    "save_wav", "ssim", "train_stage1", "train_stage2", "video_features",
]
