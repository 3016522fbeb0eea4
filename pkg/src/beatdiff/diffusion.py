"""Noise schedule, forward diffusion, training loss, and DDIM sampling.

The schedule is a plain linear beta ramp with precomputed cumulative products.
All stochastic operations take an explicit torch.Generator or integer seed so
that identical seeds give bitwise-identical results on the same platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from .conditioning import ConditionBundle

DEFAULT_TIMESTEPS = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed diffusion schedule tables, float64 throughout."""

    timesteps: int
    betas: np.ndarray
    alphas: np.ndarray
    alphas_cumprod: np.ndarray


def make_schedule(timesteps: int = DEFAULT_TIMESTEPS,
                  beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Build a linear beta schedule and its derived tables.

    Raises ValueError for a non-positive step count or betas outside (0, 1).
    """
    if not isinstance(timesteps, int) or timesteps < 1:
        raise ValueError(f"timesteps must be a positive integer, got {timesteps!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alphas_cumprod = np.cumprod(alphas)
    return NoiseSchedule(timesteps, betas, alphas, alphas_cumprod)


def _check_t(t: int, sched: NoiseSchedule) -> int:
    t = int(t)
    if not 0 <= t < sched.timesteps:
        raise ValueError(f"timestep {t} outside [0, {sched.timesteps})")
    return t


def forward_diffuse(clean, t: int, noise, sched: NoiseSchedule):
    """Sample the forward marginal at step t: sqrt(abar)*clean + sqrt(1-abar)*noise.

    Works on numpy arrays and torch tensors alike; shapes of clean and noise
    must match exactly.
    """
    t = _check_t(t, sched)
    if tuple(clean.shape) != tuple(noise.shape):
        raise ValueError(f"shape mismatch: clean {tuple(clean.shape)} vs noise {tuple(noise.shape)}")
    abar = float(sched.alphas_cumprod[t])
    return math.sqrt(abar) * clean + math.sqrt(1.0 - abar) * noise


def _drop_conditions(cond: ConditionBundle, drop_prob: float,
                     rng: torch.Generator) -> ConditionBundle:
    # Draw order is fixed (text, then music) so runs are reproducible.
    out = cond
    if cond.text is not None and not cond.text.is_null:
        if torch.rand((), generator=rng).item() < drop_prob:
            if cond.null_text is None:
                raise ValueError("conditioning dropout needs null_text on the bundle")
            out = replace(out, text=out.null_text)
    if cond.music is not None:
        if torch.rand((), generator=rng).item() < drop_prob:
            if cond.null_music is None:
                raise ValueError("conditioning dropout needs null_music on the bundle")
            out = replace(out, music=out.null_music)
    return out


def denoising_loss(denoiser: Callable,
                   clip_batch: Sequence[torch.Tensor],
                   sched: NoiseSchedule,
                   cond: Union[ConditionBundle, Sequence[ConditionBundle], None],
                   drop_prob: float,
                   rng: torch.Generator) -> torch.Tensor:
    """Epsilon-prediction MSE over a batch of clean latents.

    Per item: t ~ Uniform{0..T-1}, noise ~ N(0, I), then with probability
    drop_prob each droppable condition (text, music) is independently replaced
    by its learned null embedding. `cond` may be one bundle shared by the batch
    or a sequence with one bundle per item.
    """
    if len(clip_batch) == 0:
        raise ValueError("empty batch")
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop_prob must lie in [0, 1), got {drop_prob}")
    if cond is None:
        conds = [ConditionBundle()] * len(clip_batch)
    elif isinstance(cond, ConditionBundle):
        conds = [cond] * len(clip_batch)
    else:
        conds = list(cond)
        if len(conds) != len(clip_batch):
            raise ValueError(f"{len(conds)} bundles for {len(clip_batch)} batch items")
    total = None
    for clean, c in zip(clip_batch, conds):
        t = int(torch.randint(0, sched.timesteps, (), generator=rng).item())
        noise = torch.randn(clean.shape, generator=rng, dtype=clean.dtype)
        if drop_prob > 0.0:
            c = _drop_conditions(c, drop_prob, rng)
        noisy = forward_diffuse(clean, t, noise, sched)
        pred = denoiser(noisy, t, c)
        item = ((pred - noise) ** 2).mean()
        total = item if total is None else total + item
    return total / len(clip_batch)


def ddim_timesteps(timesteps: int, steps: int) -> np.ndarray:
    """Evenly strided decreasing timestep subsequence from T-1 down to 0."""
    if not 1 <= steps <= timesteps:
        raise ValueError(f"steps must lie in [1, {timesteps}], got {steps}")
    if steps == 1:
        return np.array([timesteps - 1], dtype=np.int64)
    return np.round(np.linspace(timesteps - 1, 0, steps)).astype(np.int64)


def ddim_sample(denoiser: Callable,
                cond: Optional[ConditionBundle],
                sched: NoiseSchedule,
                steps: int,
                guidance_scale: float,
                seed: int,
                shape: Sequence[int],
                uncond: Optional[ConditionBundle] = None,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Deterministic DDIM sampler (eta = 0) with classifier-free guidance.

    The initial latent is drawn from a standard normal seeded by `seed`. When
    guidance_scale != 1 the model is evaluated on both `cond` and `uncond` and
    the guided prediction eps_u + s * (eps_c - eps_u) drives the update.
    """
    if guidance_scale < 0.0:
        raise ValueError(f"guidance_scale must be >= 0, got {guidance_scale}")
    use_guidance = guidance_scale != 1.0
    if use_guidance and uncond is None:
        raise ValueError("guidance_scale != 1 requires an unconditional bundle")
    ts = ddim_timesteps(sched.timesteps, steps)
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    for i, t in enumerate(ts):
        t = int(t)
        eps = denoiser(z, t, cond)
        if use_guidance:
            eps_u = denoiser(z, t, uncond)
            eps = eps_u + guidance_scale * (eps - eps_u)
        abar = float(sched.alphas_cumprod[t])
        abar_prev = float(sched.alphas_cumprod[int(ts[i + 1])]) if i + 1 < len(ts) else 1.0
        pred_clean = (z - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)
        z = math.sqrt(abar_prev) * pred_clean + math.sqrt(1.0 - abar_prev) * eps
    return z
