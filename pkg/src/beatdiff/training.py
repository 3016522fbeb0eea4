"""Two-stage training, the flat config file, and chunked video generation.

Stage 1 trains the frame model on (reference frame, target frame) pairs drawn
from a window around the reference; the target latent carries the mask
residual.  Stage 2 extends a stage-1 checkpoint with the temporal modules and
the music encoder, freezes everything else, and trains on K-frame windows
conditioned on music, beats, and the cached hidden states of the preceding
frames.  Generation reuses the stage-2 model chunk by chunk, feeding each
chunk the last frames' hidden states captured at the final sampling step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch

from .audio import Waveform
from .conditioning import ConditionBundle, extract_beats
from .dataset import Clip, float_to_frames, frames_to_float
from .diffusion import (ddim_sample, ddim_timesteps, denoising_loss, make_schedule)
from .network import (AnimationModel, ModelConfig, extend_to_stage2, freeze_for_stage2,
                      load_checkpoint, save_checkpoint)


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-5
    window: int = 12
    clip_frames: int = 16
    drop_prob: float = 0.05
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.clip_frames < 2:
            raise ValueError(f"clip_frames must be >= 2, got {self.clip_frames}")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError(f"drop_prob must lie in [0, 1), got {self.drop_prob}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


_CONFIG_TYPES = {
    "stage": int, "steps": int, "batch_size": int, "lr": float, "window": int,
    "clip_frames": int, "drop_prob": float, "seed": int, "checkpoint_every": int,
}


def parse_train_config(text: str) -> TrainConfig:
    """Parse the flat `key = value` config format ('#' starts a comment)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key or not val:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        if key not in _CONFIG_TYPES:
            raise ValueError(f"config line {lineno}: unknown key {key!r} "
                             f"(known: {', '.join(sorted(_CONFIG_TYPES))})")
        if key in values:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _CONFIG_TYPES[key](val)
        except ValueError:
            raise ValueError(f"config line {lineno}: bad {key} value {val!r}") from None
    return TrainConfig(**values)


def load_train_config(path) -> TrainConfig:
    return parse_train_config(Path(path).read_text(encoding="utf-8"))


def model_schedule(model: AnimationModel):
    cfg = model.config
    return make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)


# ---- sampling helpers ----------------------------------------------------


def sample_frame_pair(frame_count: int, window: int, rng) -> tuple:
    """Reference/target index pair (0-indexed): the reference keeps a full
    window on both sides, the target lands within that window and never on
    the reference itself."""
    n, w = int(frame_count), int(window)
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")
    if n < 2 * w + 1:
        raise ValueError(f"clip with {n} frames too short for window {w} "
                         f"(needs at least {2 * w + 1})")
    i = w + int(rng.integers(n - 2 * w))
    j = i - w + int(rng.integers(2 * w))
    if j >= i:
        j += 1
    return i, j


def _encode_clip(model: AnimationModel, clip: Clip) -> torch.Tensor:
    imgs = frames_to_float(clip.frames)
    return torch.stack([model.encode_image(img) for img in imgs])


def _emit(log: Optional[Callable], step: int, loss: float, lr: float, t0: float) -> None:
    if log is not None:
        ms = (time.perf_counter() - t0) * 1000.0
        log(f"{step}\t{loss:.6f}\t{lr:g}\t{ms:.1f}")


def _maybe_checkpoint(model, cfg: TrainConfig, step: int, path) -> None:
    if path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
        save_checkpoint(model, path)


# ---- stage 1 -------------------------------------------------------------


def train_stage1(clips: Sequence[Clip], cfg: TrainConfig,
                 model: Optional[AnimationModel] = None,
                 log: Optional[Callable] = None,
                 checkpoint_path=None) -> AnimationModel:
    if cfg.stage != 1:
        raise ValueError(f"train_stage1 got a stage-{cfg.stage} config")
    if not clips:
        raise ValueError("empty dataset")
    for c in clips:
        if c.frame_count < 2 * cfg.window + 1:
            raise ValueError(f"clip with {c.frame_count} frames too short for "
                             f"window {cfg.window}")
    if model is None:
        model = AnimationModel(ModelConfig(), stage=1, init_seed=cfg.seed)
    if model.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 model")
    sched = model_schedule(model)
    latents = [_encode_clip(model, c) for c in clips]
    mask_stacks = [torch.from_numpy(c.masks) for c in clips]
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    noise_rng = torch.Generator().manual_seed(cfg.seed)
    pick = np.random.default_rng(cfg.seed)
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        items = []
        for _ in range(cfg.batch_size):
            ci = int(pick.integers(len(clips)))
            i, j = sample_frame_pair(clips[ci].frame_count, cfg.window, pick)
            items.append((ci, i, j))
        # One reference-net and one mask-encoder pass for the whole batch.
        ref_feats = model.reference_features(
            torch.stack([latents[ci][i] for ci, i, _ in items]))
        mask_feats = model.mask_encoder(
            torch.stack([mask_stacks[ci][j] for ci, _, j in items]))
        null_text = model.text_encoder.null_embedding()
        caption_cache = {}
        z0s, bundles = [], []
        for b, (ci, i, j) in enumerate(items):
            caption = clips[ci].caption
            if caption not in caption_cache:
                caption_cache[caption] = model.text_embedding(caption)
            z0s.append(latents[ci][j] + mask_feats[b])
            # The baseline deliberately excludes the mask features: with them
            # in both the target and the baseline the mask's direct gradient
            # path through the loss cancels and the mask encoder never trains.
            bundles.append(ConditionBundle(
                text=caption_cache[caption],
                reference=[f[b] for f in ref_feats],
                base_latent=latents[ci][i],
                null_text=null_text))
        loss = denoising_loss(model.predict_noise, z0s, sched, bundles,
                              cfg.drop_prob, noise_rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        _emit(log, step, float(loss.detach()), cfg.lr, t0)
        _maybe_checkpoint(model, cfg, step, checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model


# ---- stage 2 -------------------------------------------------------------


def train_stage2(clips: Sequence[Clip], cfg: TrainConfig,
                 stage1: Union[AnimationModel, str, Path],
                 log: Optional[Callable] = None,
                 checkpoint_path=None) -> AnimationModel:
    if cfg.stage != 2:
        raise ValueError(f"train_stage2 got a stage-{cfg.stage} config")
    if not clips:
        raise ValueError("empty dataset")
    base = stage1 if isinstance(stage1, AnimationModel) else load_checkpoint(stage1)
    if base.stage != 1:
        raise ValueError("train_stage2 needs a stage-1 model or checkpoint")
    for c in clips:
        if c.frame_count < cfg.clip_frames:
            raise ValueError(f"clip with {c.frame_count} frames shorter than the "
                             f"{cfg.clip_frames}-frame training window")
    model = extend_to_stage2(base, init_seed=cfg.seed)
    freeze_for_stage2(model)
    sched = model_schedule(model)
    latents = [_encode_clip(model, c) for c in clips]
    mask_stacks = [torch.from_numpy(c.masks) for c in clips]
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    noise_rng = torch.Generator().manual_seed(cfg.seed)
    pick = np.random.default_rng(cfg.seed)
    ctx_frames = model.config.context_frames
    k = cfg.clip_frames
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        z0s, bundles = [], []
        for _ in range(cfg.batch_size):
            ci = int(pick.integers(len(clips)))
            clip = clips[ci]
            f0 = int(pick.integers(clip.frame_count - k + 1))
            r = int(pick.integers(clip.frame_count))
            with torch.no_grad():
                ref_feats = model.reference_features(latents[ci][r])
                mask_feat = model.mask_encoder(mask_stacks[ci][r])[0]
                text = model.text_embedding(clip.caption)
            z0s.append(latents[ci][f0:f0 + k] + mask_feat[None])
            music = model.music_embedding(
                clip.waveform, (f0 / clip.fps, (f0 + k) / clip.fps))
            beat = model.beat_embedding(clip.beat_bits[f0:f0 + k])
            motion = None
            if ctx_frames > 0 and f0 >= ctx_frames:
                # Context mirrors generation: hidden states of the preceding
                # frames at the cleanest timestep, captured pre-temporal.
                with torch.no_grad():
                    prev = latents[ci][f0 - ctx_frames:f0] + mask_feat[None]
                    _, caps = model.predict_noise(
                        prev, 0, ConditionBundle(text=text, reference=ref_feats),
                        capture=True)
                motion = [c.permute(1, 0, 2).contiguous() for c in caps]
            bundles.append(ConditionBundle(
                text=text, music=music, beat=beat, reference=ref_feats,
                motion=motion, base_latent=latents[ci][r],
                null_text=model.text_encoder.null_embedding(),
                null_music=model.music_encoder.null_token))
        loss = denoising_loss(model.predict_noise, z0s, sched, bundles,
                              cfg.drop_prob, noise_rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        _emit(log, step, float(loss.detach()), cfg.lr, t0)
        _maybe_checkpoint(model, cfg, step, checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model


# ---- generation ----------------------------------------------------------


@dataclass
class GenerateConfig:
    ddim_steps: int = 50
    guidance: float = 3.5
    seed: int = 0
    fps: float = 12.0
    clip_frames: int = 16

    def __post_init__(self):
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")
        if self.guidance < 0:
            raise ValueError("guidance must be >= 0")
        if self.fps <= 0 or self.clip_frames < 1:
            raise ValueError("fps must be positive and clip_frames >= 1")


def _frame_conditions(model: AnimationModel, ref_image: np.ndarray,
                      mask: np.ndarray, caption: str):
    with torch.no_grad():
        ref_lat = model.encode_image(ref_image)
        ref_feats = model.reference_features(ref_lat)
        mask_feat = model.mask_feature(mask)
        text = model.text_embedding(caption)
    return ref_lat, ref_feats, mask_feat, text


def generate_frame(model: AnimationModel, ref_image: np.ndarray, mask: np.ndarray,
                   caption: str, gcfg: Optional[GenerateConfig] = None) -> np.ndarray:
    """Sample one frame from a stage-1 model; returns a uint8 image.

    ref_image is (H, W, 3) in [-1, 1], mask is (H, W) in [0, 1].
    """
    if model.stage != 1:
        raise ValueError("generate_frame needs a stage-1 model")
    gcfg = gcfg if gcfg is not None else GenerateConfig()
    ref_lat, ref_feats, mask_feat, text = _frame_conditions(model, ref_image, mask, caption)
    cond = ConditionBundle(text=text, reference=ref_feats,
                           base_latent=ref_lat,
                           null_text=model.text_encoder.null_embedding())
    uncond = model.null_bundle(cond) if gcfg.guidance != 1.0 else None
    sched = model_schedule(model)
    abars = sched.alphas_cumprod

    def shifted(z, t, bundle):
        # The trained target latent is E(I) + mask features; sampling adds the
        # schedule-scaled mask term to the network input so the chain denoises
        # toward E(I) itself.
        return model.predict_noise(z + math.sqrt(float(abars[t])) * mask_feat, t, bundle)

    with torch.no_grad():
        z = ddim_sample(shifted, cond, sched, gcfg.ddim_steps, gcfg.guidance,
                        gcfg.seed, tuple(mask_feat.shape), uncond=uncond)
        img = model.decode_latent(z)
    return float_to_frames(img)


def generate_video(model: AnimationModel, ref_image: np.ndarray, mask: np.ndarray,
                   waveform: Waveform, caption: str, length: int,
                   gcfg: Optional[GenerateConfig] = None,
                   return_details: bool = False):
    """Chunked autoregressive sampling from a stage-2 model.

    Produces ceil(length / clip_frames) chunks; each chunk is conditioned on
    the music and beat segment covering its time span and on the hidden states
    of the last context frames of the previous chunk, captured at the final
    sampling step.  Returns uint8 frames (length, H, W, 3); with
    return_details also returns per-chunk records for cache-coherence checks.
    """
    if model.stage != 2:
        raise ValueError("generate_video needs a stage-2 model")
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    gcfg = gcfg if gcfg is not None else GenerateConfig()
    if waveform.duration + 1e-9 < length / gcfg.fps:
        raise ValueError(
            f"waveform covers {waveform.duration:.3f}s but {length} frames at "
            f"{gcfg.fps} fps need {length / gcfg.fps:.3f}s")
    k = gcfg.clip_frames
    m = model.config.context_frames
    n_chunks = (length + k - 1) // k
    bits = np.zeros(n_chunks * k, dtype=np.uint8)
    bits[:length] = extract_beats(waveform, gcfg.fps, length)
    ref_lat, ref_feats, mask_feat, text = _frame_conditions(model, ref_image, mask, caption)
    sched = model_schedule(model)
    abars = sched.alphas_cumprod
    t_last = int(ddim_timesteps(sched.timesteps, gcfg.ddim_steps)[-1])
    frames = []
    details = []
    context = None
    with torch.no_grad():
        for c in range(n_chunks):
            f0 = c * k
            span = (f0 / gcfg.fps, min((f0 + k) / gcfg.fps, waveform.duration))
            music = model.music_embedding(waveform, span)
            beat = model.beat_embedding(bits[f0:f0 + k])
            cond = ConditionBundle(
                text=text, music=music, beat=beat, reference=ref_feats,
                motion=context, base_latent=ref_lat,
                null_text=model.text_encoder.null_embedding(),
                null_music=model.music_encoder.null_token)
            uncond = model.null_bundle(cond) if gcfg.guidance != 1.0 else None
            captured = {}

            def shifted(z, t, bundle, _cond=cond, _cap=captured):
                zin = z + math.sqrt(float(abars[t])) * mask_feat[None]
                if t == t_last and bundle is _cond:
                    eps, caps = model.predict_noise(zin, t, bundle, capture=True)
                    _cap["caps"] = caps
                    _cap["final_input"] = zin
                    return eps
                return model.predict_noise(zin, t, bundle)

            z = ddim_sample(shifted, cond, sched, gcfg.ddim_steps, gcfg.guidance,
                            gcfg.seed * 4096 + c, (k, *mask_feat.shape),
                            uncond=uncond)
            caps = captured["caps"]
            context = ([cap[-m:].permute(1, 0, 2).contiguous() for cap in caps]
                       if m > 0 else None)
            if return_details:
                details.append({
                    "cond": cond, "final_input": captured["final_input"],
                    "t_last": t_last, "context": context, "latents": z,
                    "music_span": span})
            for idx in range(k):
                frames.append(float_to_frames(model.decode_latent(z[idx])))
    out = np.stack(frames)[:length]
    return (out, details) if return_details else out
