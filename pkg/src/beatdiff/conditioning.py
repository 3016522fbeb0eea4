"""Condition encoders: pose mask, caption text, music spectrogram, and beats.

The bundle gathered here is everything the denoiser attends to.  Tensors in a
bundle are unbatched (token dimension first); the network broadcasts them over
its batch internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import audio
from .layers import Attention

UNK = "<unk>"

# Motion-only caption vocabulary.  Deliberately disjoint from the sprite
# appearance words (colors and shape names) used by the synthetic dataset.
VOCAB = [
    UNK, "the", "figure", "bounces", "up", "and", "down", "in", "rhythm",
    "with", "beat", "sways", "gently", "from", "side", "to", "music",
    "spins", "around", "time", "a", "steady", "quick", "slow",
]
_VOCAB_INDEX = {word: i for i, word in enumerate(VOCAB)}


def tokenize(caption: str, max_tokens: int) -> np.ndarray:
    """Whitespace tokenize and map to vocabulary ids; unknown words become UNK."""
    words = caption.lower().split()
    if len(words) > max_tokens:
        raise ValueError(f"caption has {len(words)} tokens, limit is {max_tokens}")
    return np.array([_VOCAB_INDEX.get(w, 0) for w in words], dtype=np.int64)


@dataclass
class TextEmbedding:
    """Caption token embeddings, or the learned null embedding for no caption."""

    tokens: torch.Tensor  # (n, dim)
    is_null: bool = False


@dataclass
class ConditionBundle:
    """Everything the denoiser can attend to.  Any field may be absent."""

    text: Optional[TextEmbedding] = None
    music: Optional[torch.Tensor] = None            # (L, dim)
    beat: Optional[torch.Tensor] = None             # (K, dim)
    reference: Optional[List[torch.Tensor]] = None  # per site, (HW, width)
    motion: Optional[List[torch.Tensor]] = None     # per site, (HW, M, width)
    base_latent: Optional[torch.Tensor] = None      # (C, H, W) clean baseline
    null_text: Optional[TextEmbedding] = None
    null_music: Optional[torch.Tensor] = None


class MaskEncoder(nn.Module):
    """Strided conv stack mapping an image-resolution mask to latent shape.

    The final projection is zero-initialized, so at construction every mask
    encodes to an all-zero feature map and the residual add is a no-op.
    """

    def __init__(self, patch_factor: int, latent_channels: int):
        super().__init__()
        if patch_factor not in (2, 4):
            raise ValueError(f"unsupported patch factor {patch_factor}")
        layers = []
        chans = 1
        steps = {2: [16], 4: [16, 32]}[patch_factor]
        for out in steps:
            layers.append(nn.Conv2d(chans, out, 3, stride=2, padding=1))
            layers.append(nn.SiLU())
            chans = out
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(chans, latent_channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        if mask.dim() == 2:
            mask = mask[None]
        if mask.dim() != 3:
            raise ValueError(f"expected (H, W) or (B, H, W) mask, got {tuple(mask.shape)}")
        return self.proj(self.body(mask[:, None]))


def apply_mask_residual(latent, feature):
    """Add the mask feature map to a latent of identical shape."""
    if tuple(latent.shape) != tuple(feature.shape):
        raise ValueError(f"shape mismatch: {tuple(latent.shape)} vs {tuple(feature.shape)}")
    return latent + feature


class TextEncoder(nn.Module):
    """Tiny caption encoder: lookup + learned positions + one attention block."""

    def __init__(self, dim: int, max_tokens: int, heads: int):
        super().__init__()
        self.max_tokens = max_tokens
        self.embed = nn.Embedding(len(VOCAB), dim)
        self.positions = nn.Parameter(torch.zeros(max_tokens, dim))
        nn.init.normal_(self.positions, std=0.02)
        self.block = Attention(dim, heads)
        self.null_token = nn.Parameter(torch.zeros(1, dim))
        nn.init.normal_(self.null_token, std=0.02)

    def null_embedding(self) -> TextEmbedding:
        return TextEmbedding(tokens=self.null_token, is_null=True)

    def forward(self, caption: str) -> TextEmbedding:
        ids = tokenize(caption, self.max_tokens)
        if len(ids) == 0:
            return self.null_embedding()
        x = self.embed(torch.from_numpy(ids)) + self.positions[: len(ids)]
        x = self.block(x[None])[0]
        return TextEmbedding(tokens=x, is_null=False)


def music_patches(w: audio.Waveform, span: Tuple[float, float], n_mels: int,
                  n_fft: int, hop: int, patch_frames: int) -> np.ndarray:
    """Slice a time span, compute its log-mel, and fold non-overlapping
    patch_frames-wide column groups into flat patch vectors (L, n_mels * pf)."""
    start_s, end_s = span
    if end_s <= start_s:
        raise ValueError(f"empty span {span}")
    if start_s < -1e-9 or end_s > w.duration + 1e-9:
        raise ValueError(f"span {span} not covered by a {w.duration:.3f}s waveform")
    a = int(round(start_s * w.sample_rate))
    b = int(round(end_s * w.sample_rate))
    if b - a < n_fft:
        raise ValueError(f"span shorter than one analysis window ({n_fft} samples)")
    mel = audio.log_mel(audio.Waveform(w.samples[a:b], w.sample_rate),
                        n_mels=n_mels, n_fft=n_fft, hop=hop)
    frames = mel.shape[1]
    n_patches = int(np.ceil(frames / patch_frames))
    padded = np.full((n_mels, n_patches * patch_frames), np.log(audio.LOG_FLOOR))
    padded[:, :frames] = mel
    # (L, patch_frames * n_mels), time-major inside each patch
    return padded.T.reshape(n_patches, patch_frames * n_mels)


class MusicEncoder(nn.Module):
    """Spectrogram patch transformer producing one token per time patch."""

    def __init__(self, dim: int, n_mels: int, patch_frames: int, max_tokens: int,
                 heads: int, blocks: int = 2):
        super().__init__()
        self.n_mels = n_mels
        self.patch_frames = patch_frames
        self.max_tokens = max_tokens
        self.proj = nn.Linear(n_mels * patch_frames, dim)
        self.positions = nn.Parameter(torch.zeros(max_tokens, dim))
        nn.init.normal_(self.positions, std=0.02)
        self.blocks = nn.ModuleList(Attention(dim, heads) for _ in range(blocks))
        self.null_token = nn.Parameter(torch.zeros(1, dim))
        nn.init.normal_(self.null_token, std=0.02)

    def forward(self, patches: np.ndarray) -> torch.Tensor:
        if patches.shape[0] > self.max_tokens:
            raise ValueError(f"{patches.shape[0]} patches exceed limit {self.max_tokens}")
        dtype = self.proj.weight.dtype
        x = self.proj(torch.as_tensor(patches, dtype=dtype))
        x = x + self.positions[: x.shape[0]].to(dtype)
        x = x[None]
        for block in self.blocks:
            x = block(x)
        return x[0]


def embed_beats(bits: np.ndarray, table: torch.Tensor) -> torch.Tensor:
    """Look up one dense row per frame from a 2-row on/off beat table."""
    bits = np.asarray(bits)
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("beat vector must be binary")
    if table.shape[0] != 2:
        raise ValueError(f"beat table must have 2 rows, got {table.shape[0]}")
    return table[torch.from_numpy(bits.astype(np.int64))]


def quantize_beat_times(times_s: np.ndarray, fps: float, frame_count: int) -> np.ndarray:
    """Snap beat times to nearest video frame (ties round down); returns a
    binary per-frame vector where repeated hits collapse to one."""
    bits = np.zeros(frame_count, dtype=np.uint8)
    for t in np.asarray(times_s, dtype=np.float64):
        frame = int(np.ceil(t * fps - 0.5))
        if 0 <= frame < frame_count:
            bits[frame] = 1
    return bits


def extract_beats(w: audio.Waveform, fps: float, frame_count: int,
                  n_mels: int = 64, n_fft: int = 1024, hop: int = 256) -> np.ndarray:
    """Track beats in a waveform and quantize them onto frame_count video frames.

    Digital silence yields the all-zero vector.  The waveform must span the
    full frame range.
    """
    if frame_count < 1:
        raise ValueError(f"frame_count must be >= 1, got {frame_count}")
    if w.duration + 1e-9 < frame_count / fps:
        raise ValueError(
            f"waveform covers {w.duration:.3f}s but {frame_count} frames at "
            f"{fps} fps need {frame_count / fps:.3f}s")
    mel = audio.log_mel(w, n_mels=n_mels, n_fft=n_fft, hop=hop)
    env = audio.onset_envelope(mel)
    if env.max() <= 0.0:
        return np.zeros(frame_count, dtype=np.uint8)
    frame_rate = w.sample_rate / hop
    bpm = audio.estimate_tempo(env, frame_rate)
    beat_frames = audio.track_beats(env, frame_rate, bpm)
    # Flux flags window entry, not window center; snap to the energy peak.
    energy = np.exp(mel).sum(axis=0)
    beat_frames = audio.refine_to_energy_peaks(
        energy, beat_frames, max(1, n_fft // (2 * hop)))
    times = beat_frames * hop / w.sample_rate
    return quantize_beat_times(times, fps, frame_count)
