import numpy as np
import pytest
import torch

from beatdiff.conditioning import extract_beats
from beatdiff.dataset import Clip, ClipSpec, clip_audio, make_caption, synth_video
from beatdiff.network import AnimationModel, ModelConfig


def tiny_model_config(**overrides) -> ModelConfig:
    """16x16 images -> 4x4 latents; small widths so forward passes are cheap."""
    kw = dict(image_size=16, widths=(16, 24, 24), heads=4, cond_dim=16,
              time_dim=16, mel_bins=16, stft_window=256, stft_hop=128,
              patch_frames=8, music_blocks=1, context_frames=2, timesteps=20)
    kw.update(overrides)
    return ModelConfig(**kw)


def tiny_clip(motion: str, bpm: float, seed: int) -> Clip:
    spec = ClipSpec(clip_id=f"tiny-{motion}", motion_type=motion, bpm=bpm,
                    duration_s=2.0, fps=6.0, image_size=16, seed=seed)
    frames, masks = synth_video(spec)
    w = clip_audio(spec)
    return Clip(frames=frames, masks=masks, waveform=w,
                caption=make_caption(spec), fps=spec.fps,
                beat_bits=extract_beats(w, spec.fps, spec.frame_count))


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture(scope="session")
def tiny_clips():
    return [tiny_clip("bounce", 120.0, 11),
            tiny_clip("sway", 90.0, 22),
            tiny_clip("spin", 150.0, 33)]


@pytest.fixture()
def tiny_model(tiny_cfg) -> AnimationModel:
    return AnimationModel(tiny_cfg, stage=1, init_seed=0)


def rand_image(rng: np.random.Generator, size: int = 16) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, (size, size, 3))


def seeded_latent(model: AnimationModel, seed: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return model.encode_image(rand_image(rng, model.config.image_size))
