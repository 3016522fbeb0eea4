"""Denoising U-Net, reference feature network, and the composite model.

The denoiser is a three-level U-Net over latents with an attention site at
every level in both halves (five sites total).  At each site, in order:
reference fusion (self-attention over the width-concatenated token grid of the
noisy branch and the reference branch), text cross-attention, and in clip mode
the music, beat, and motion temporal modules.

The reference network is a structural twin run once per reference image on its
clean latent; the token features entering each of its sites are the fusion
inputs for the main branch.

Every parameter belongs to exactly one named group; checkpoints store one flat
little-endian float32 array per group plus a topology descriptor that loading
validates against.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import audio, codec
from .conditioning import (ConditionBundle, MaskEncoder, MusicEncoder, TextEmbedding,
                           TextEncoder, embed_beats, music_patches)
from .diffusion import make_schedule
from .layers import Attention, sinusoidal_embedding
from .temporal import BeatModule, MotionModule, MusicModule

CHECKPOINT_MAGIC = b"BDCK"
CHECKPOINT_VERSION = 1

GROUP_NAMES = (
    "conv", "spatial_attention", "text_cross_attention", "time_embedding",
    "temporal_music", "temporal_beat", "temporal_motion",
    "mask_encoder", "text_encoder", "music_encoder",
)

STAGE2_TRAINABLE_GROUPS = frozenset(
    {"temporal_music", "temporal_beat", "temporal_motion", "music_encoder"})


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Topology and schedule hyperparameters; stored in every checkpoint."""

    image_size: int = 64
    patch_factor: int = 4
    codec_seed: int = 0
    widths: tuple = (64, 128, 128)
    heads: int = 4
    cond_dim: int = 64
    time_dim: int = 64
    max_text_tokens: int = 16
    mel_bins: int = 64
    stft_window: int = 1024
    stft_hop: int = 256
    patch_frames: int = 8
    music_blocks: int = 2
    max_music_tokens: int = 64
    context_frames: int = 2
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.image_size % self.patch_factor:
            raise ValueError("image_size must be divisible by patch_factor")
        if len(self.widths) != 3:
            raise ValueError("widths must list three levels")
        for w in self.widths:
            if w % 8 or w % self.heads:
                raise ValueError(f"width {w} must be divisible by 8 and by heads")
        if self.cond_dim % self.heads:
            raise ValueError("cond_dim must be divisible by heads")
        if self.latent_size % 4:
            raise ValueError("latent grid must be divisible by 4 for two downsamples")
        if self.context_frames < 0:
            raise ValueError("context_frames must be >= 0")

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch_factor * self.patch_factor

    @property
    def latent_size(self) -> int:
        return self.image_size // self.patch_factor


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.out_dim = dim * 2
        self.net = nn.Sequential(
            nn.Linear(dim, dim * 2), nn.SiLU(), nn.Linear(dim * 2, dim * 2))

    def forward(self, t: int, batch: int, dtype) -> torch.Tensor:
        emb = sinusoidal_embedding([int(t)], self.dim, dtype=dtype)
        return self.net(emb).expand(batch, self.out_dim)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionSite(nn.Module):
    """One attention location: reference fusion plus conditional attachments."""

    def __init__(self, width: int, cfg: ModelConfig, stage: int, reference_mode: bool):
        super().__init__()
        self.fuse = Attention(width, cfg.heads)
        if not reference_mode:
            self.text_attn = Attention(width, cfg.heads, kv_dim=cfg.cond_dim, zero_out=True)
            if stage == 2:
                self.music_mod = MusicModule(width, cfg.cond_dim, cfg.heads)
                self.beat_mod = BeatModule(width, cfg.cond_dim, cfg.heads)
                self.motion_mod = MotionModule(width, cfg.heads)


def _broadcast_rows(x: torch.Tensor, batch: int, frame_count: Optional[int]) -> torch.Tensor:
    if x.dim() == 2:
        x = x[None]
    if x.shape[0] == batch:
        return x
    if x.shape[0] == 1:
        return x.expand(batch, *x.shape[1:])
    if frame_count and x.shape[0] * frame_count == batch:
        return x.repeat_interleave(frame_count, dim=0)
    raise ValueError(f"cannot broadcast {tuple(x.shape)} over batch {batch}")


class UNet(nn.Module):
    def __init__(self, cfg: ModelConfig, stage: int, reference_mode: bool = False):
        super().__init__()
        self.cfg = cfg
        self.stage = stage
        self.reference_mode = reference_mode
        c = cfg.latent_channels
        w0, w1, w2 = cfg.widths
        self.time_mlp = TimeEmbedding(cfg.time_dim)
        td = self.time_mlp.out_dim
        self.stem = nn.Conv2d(c, w0, 3, padding=1)
        self.enc_res0 = ResBlock(w0, w0, td)
        self.site0 = AttentionSite(w0, cfg, stage, reference_mode)
        self.down0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.enc_res1 = ResBlock(w1, w1, td)
        self.site1 = AttentionSite(w1, cfg, stage, reference_mode)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.mid_res = ResBlock(w2, w2, td)
        self.site2 = AttentionSite(w2, cfg, stage, reference_mode)
        self.up0 = nn.Conv2d(w2, w1, 3, padding=1)
        self.dec_res1 = ResBlock(w1 + w1, w1, td)
        self.site3 = AttentionSite(w1, cfg, stage, reference_mode)
        self.up1 = nn.Conv2d(w1, w0, 3, padding=1)
        self.dec_res0 = ResBlock(w0 + w0, w0, td)
        self.site4 = AttentionSite(w0, cfg, stage, reference_mode)
        self.head_norm = nn.GroupNorm(8, w0)
        self.head = nn.Conv2d(w0, c, 3, padding=1)
        # Zero output init: with a baseline in the bundle the initial clean
        # estimate is exactly that baseline.  Warmed or trained weights
        # restore gradient flow to everything upstream.
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        # The raw head regresses the clean latent as a residual on top of the
        # bundle's base_latent (the reference latent plus the mask features
        # when the caller supplies it); noise predictions leave as
        # (x - sqrt(abar_t) * (base + head)) / divisor.  The sampler's clean
        # estimate is then essentially base + head, so a chain started far off
        # the training marginal still lands next to the reference on the first
        # step, and the head only models the motion delta instead of the whole
        # frame.  The divisor is floored: an unfloored sqrt(1 - abar_t) would
        # amplify head error 100x on near-clean draws and shock the optimizer.
        # The map stays exact away from the floor: a head that hits its target
        # still yields exactly the injected noise.
        sched = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
        ab = torch.from_numpy(sched.alphas_cumprod).to(torch.float32)
        self.register_buffer("out_mix",
                             torch.stack([ab.sqrt(),
                                          (1.0 - ab).sqrt().clamp_min(0.2)], dim=1),
                             persistent=False)

    def sites(self) -> List[AttentionSite]:
        return [self.site0, self.site1, self.site2, self.site3, self.site4]

    def _site(self, idx: int, h: torch.Tensor, cond: Optional[ConditionBundle],
              frame_count: Optional[int], caps: Optional[list]) -> torch.Tensor:
        site = self.sites()[idx]
        b_, c, hh, ww = h.shape
        n = hh * ww
        tokens = h.flatten(2).transpose(1, 2)
        if self.reference_mode:
            caps.append(tokens)
            tokens = site.fuse(tokens)
        else:
            ref = cond.reference[idx] if (cond is not None and cond.reference is not None) else None
            if ref is not None:
                r = _broadcast_rows(ref, b_, frame_count)
                tokens = site.fuse(torch.cat([tokens, r], dim=1))[:, :n]
            else:
                tokens = site.fuse(tokens)
            if cond is not None and cond.text is not None:
                tt = _broadcast_rows(cond.text.tokens, b_, frame_count)
                tokens = site.text_attn(tokens, kv=tt)
            if caps is not None:
                caps.append(tokens)
            if self.stage == 2 and frame_count is not None:
                k = frame_count
                clip = tokens.reshape(b_ // k, k, n, c)
                if cond is not None and cond.music is not None:
                    clip = site.music_mod(clip, cond.music)
                if cond is not None and cond.beat is not None:
                    clip = site.beat_mod(clip, cond.beat)
                ctx = cond.motion[idx] if (cond is not None and cond.motion is not None) else None
                clip = site.motion_mod(clip, ctx)
                tokens = clip.reshape(b_, n, c)
        return tokens.transpose(1, 2).reshape(b_, c, hh, ww)

    def forward(self, x: torch.Tensor, t: int, cond: Optional[ConditionBundle],
                frame_count: Optional[int] = None, capture: bool = False):
        temb = self.time_mlp(t, x.shape[0], x.dtype)
        caps = [] if (capture or self.reference_mode) else None
        h = self.stem(x)
        h = self.enc_res0(h, temb)
        h = self._site(0, h, cond, frame_count, caps)
        skip0 = h
        h = self.down0(h)
        h = self.enc_res1(h, temb)
        h = self._site(1, h, cond, frame_count, caps)
        skip1 = h
        h = self.down1(h)
        h = self.mid_res(h, temb)
        h = self._site(2, h, cond, frame_count, caps)
        h = self.up0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec_res1(torch.cat([h, skip1], dim=1), temb)
        h = self._site(3, h, cond, frame_count, caps)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec_res0(torch.cat([h, skip0], dim=1), temb)
        h = self._site(4, h, cond, frame_count, caps)
        out = self.head(F.silu(self.head_norm(h)))
        if not self.reference_mode:
            if cond is not None and cond.base_latent is not None:
                out = out + cond.base_latent
            mix = self.out_mix[int(t)]
            out = (x - mix[0] * out) / mix[1]
        return out, caps

    def features(self, x: torch.Tensor, t: int = 0) -> torch.Tensor:
        """Spatially pooled bottleneck features, shape (B, mid_width)."""
        temb = self.time_mlp(t, x.shape[0], x.dtype)
        h = self.stem(x)
        h = self.enc_res0(h, temb)
        h = self.down0(h)
        h = self.enc_res1(h, temb)
        h = self.down1(h)
        h = self.mid_res(h, temb)
        return h.mean(dim=(2, 3))


class AnimationModel(nn.Module):
    """Codec + condition encoders + denoiser + reference network.

    stage 1 holds the frame-level model; stage 2 adds the music encoder, the
    beat embedding table, and the per-site temporal modules.
    """

    def __init__(self, cfg: Optional[ModelConfig] = None, stage: int = 1,
                 init_seed: int = 0):
        super().__init__()
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        cfg = cfg if cfg is not None else ModelConfig()
        torch.manual_seed(init_seed)
        self.config = cfg
        self.stage = stage
        self.codec = codec.CodecConfig(cfg.patch_factor, cfg.codec_seed)
        self.mask_encoder = MaskEncoder(cfg.patch_factor, cfg.latent_channels)
        self.text_encoder = TextEncoder(cfg.cond_dim, cfg.max_text_tokens, cfg.heads)
        self.denoiser = UNet(cfg, stage)
        self.reference_net = UNet(cfg, stage=1, reference_mode=True)
        if stage == 2:
            self.music_encoder = MusicEncoder(
                cfg.cond_dim, cfg.mel_bins, cfg.patch_frames,
                cfg.max_music_tokens, cfg.heads, cfg.music_blocks)
            self.beat_table = nn.Parameter(torch.empty(2, cfg.cond_dim))
            nn.init.normal_(self.beat_table, std=0.02)

    # ---- encoders -------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        lat = codec.encode(image, self.codec)
        dtype = self.denoiser.stem.weight.dtype
        return torch.from_numpy(lat).permute(2, 0, 1).to(dtype)

    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        lat = latent.detach().to(torch.float32).permute(1, 2, 0).numpy()
        return codec.decode(lat, self.codec)

    def mask_feature(self, mask) -> torch.Tensor:
        dtype = self.denoiser.stem.weight.dtype
        if isinstance(mask, np.ndarray):
            mask = torch.from_numpy(np.ascontiguousarray(mask))
        return self.mask_encoder(mask.to(dtype))[0]

    def text_embedding(self, caption: str) -> TextEmbedding:
        return self.text_encoder(caption)

    def music_embedding(self, w: audio.Waveform, span) -> torch.Tensor:
        cfg = self.config
        patches = music_patches(w, span, cfg.mel_bins, cfg.stft_window,
                                cfg.stft_hop, cfg.patch_frames)
        return self.music_encoder(patches)

    def beat_embedding(self, bits: np.ndarray) -> torch.Tensor:
        return embed_beats(bits, self.beat_table)

    def reference_features(self, ref_latent: torch.Tensor) -> List[torch.Tensor]:
        unbatched = ref_latent.dim() == 3
        x = ref_latent[None] if unbatched else ref_latent
        _, caps = self.reference_net(x, 0, None)
        return [c[0] for c in caps] if unbatched else caps

    def null_bundle(self, cond: ConditionBundle) -> ConditionBundle:
        """CFG unconditional twin: text and music swap to their learned nulls;
        reference, beat, motion, and the clean baseline stay in place."""
        null_text = self.text_encoder.null_embedding()
        null_music = None
        if self.stage == 2:
            null_music = self.music_encoder.null_token
        return ConditionBundle(
            text=null_text if cond.text is not None else None,
            music=null_music if cond.music is not None else None,
            beat=cond.beat, reference=cond.reference, motion=cond.motion,
            base_latent=cond.base_latent,
            null_text=null_text, null_music=null_music)

    # ---- denoising ------------------------------------------------------

    def predict_noise(self, z: torch.Tensor, t: int,
                      cond: Optional[ConditionBundle] = None, capture: bool = False):
        """Predict the noise component of z at step t.

        stage 1: z is (C, H, W) or a batch (B, C, H, W) of independent frames.
        stage 2: z is a clip (K, C, H, W) or a batch (B, K, C, H, W); rank 3 is
        rejected because clip context is required.  With capture=True also
        returns the post-spatial hidden tokens at every attention site.
        """
        if self.stage == 2:
            if z.dim() == 3:
                raise ValueError("stage-2 denoising needs clip-shaped input (K, C, H, W)")
            if z.dim() == 4:
                flat, lead = z, None
                k = z.shape[0]
            elif z.dim() == 5:
                lead = z.shape[:2]
                k = z.shape[1]
                flat = z.reshape(-1, *z.shape[2:])
            else:
                raise ValueError(f"bad input rank {z.dim()}")
            out, caps = self.denoiser(flat, t, cond, frame_count=k, capture=capture)
            if lead is not None:
                out = out.reshape(*lead, *out.shape[1:])
        else:
            unbatched = z.dim() == 3
            x = z[None] if unbatched else z
            if x.dim() != 4:
                raise ValueError(f"bad input rank {z.dim()}")
            out, caps = self.denoiser(x, t, cond, capture=capture)
            if unbatched:
                out = out[0]
        if capture:
            return out, caps
        return out


# ---- parameter bookkeeping ---------------------------------------------


def classify_parameter(name: str) -> str:
    if name.startswith("mask_encoder."):
        return "mask_encoder"
    if name.startswith("text_encoder."):
        return "text_encoder"
    if name.startswith("music_encoder."):
        return "music_encoder"
    if ".music_mod." in name:
        return "temporal_music"
    if ".beat_mod." in name or name == "beat_table":
        return "temporal_beat"
    if ".motion_mod." in name:
        return "temporal_motion"
    if ".text_attn." in name:
        return "text_cross_attention"
    if ".fuse." in name:
        return "spatial_attention"
    if "time_mlp" in name or ".time_proj." in name:
        return "time_embedding"
    return "conv"


def parameter_groups(model: AnimationModel) -> dict:
    """Partition of named parameters into groups, each sorted by name."""
    groups = {}
    for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        groups.setdefault(classify_parameter(name), []).append((name, p))
    return groups


def freeze_for_stage2(model: AnimationModel) -> None:
    """Stage 2 trains the temporal groups and the music encoder; everything
    else, the reference network included, stays frozen."""
    if model.stage != 2:
        raise ValueError("freeze_for_stage2 needs a stage-2 model")
    for gname, items in parameter_groups(model).items():
        trainable = gname in STAGE2_TRAINABLE_GROUPS
        for _, p in items:
            p.requires_grad_(trainable)


def group_hashes(model: AnimationModel) -> dict:
    out = {}
    for gname, items in parameter_groups(model).items():
        h = hashlib.sha256()
        for _, p in items:
            h.update(p.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
        out[gname] = h.hexdigest()
    return out


# ---- checkpoints --------------------------------------------------------


def topology_descriptor(model: AnimationModel) -> dict:
    d = asdict(model.config)
    d["widths"] = list(d["widths"])
    return {"stage": model.stage, "model": d}


def save_checkpoint(model: AnimationModel, path) -> None:
    groups = parameter_groups(model)
    names = sorted(groups)
    blobs = []
    meta = []
    for gname in names:
        blob = b"".join(
            p.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
            for _, p in groups[gname])
        meta.append({"name": gname, "bytes": len(blob)})
        blobs.append(blob)
    header = {"format_version": CHECKPOINT_VERSION,
              "topology": topology_descriptor(model), "groups": meta}
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def _read_header(f, path) -> dict:
    magic = f.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    version, size = struct.unpack("<II", f.read(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    return json.loads(f.read(size).decode("utf-8"))


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, path)


def load_checkpoint(path) -> AnimationModel:
    with open(path, "rb") as f:
        header = _read_header(f, path)
        topo = header["topology"]
        cfg_dict = dict(topo["model"])
        cfg_dict["widths"] = tuple(cfg_dict["widths"])
        cfg = ModelConfig(**cfg_dict)
        model = AnimationModel(cfg, stage=topo["stage"])
        groups = parameter_groups(model)
        expected = {g: sum(p.numel() * 4 for _, p in items) for g, items in groups.items()}
        stored = {g["name"]: g["bytes"] for g in header["groups"]}
        if stored != expected:
            raise CheckpointError(
                f"{path}: parameter groups don't match this topology "
                f"(stored {stored}, expected {expected})")
        with torch.no_grad():
            for gname in sorted(groups):
                for _, p in groups[gname]:
                    raw = f.read(p.numel() * 4)
                    if len(raw) != p.numel() * 4:
                        raise CheckpointError(f"{path}: truncated checkpoint")
                    arr = np.frombuffer(raw, dtype="<f4").reshape(tuple(p.shape))
                    p.copy_(torch.from_numpy(arr.copy()).to(p.dtype))
    return model


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def extend_to_stage2(model: AnimationModel, init_seed: int = 0) -> AnimationModel:
    """Attach the stage-2 modules to a trained stage-1 model.

    Shared parameters are copied over; the music encoder, beat table, and
    temporal modules come up fresh (with zero-initialized output projections,
    so the clip-mode model initially reproduces the stage-1 predictions)."""
    if model.stage != 1:
        raise ValueError("extend_to_stage2 expects a stage-1 model")
    m2 = AnimationModel(model.config, stage=2, init_seed=init_seed)
    missing, unexpected = m2.load_state_dict(model.state_dict(), strict=False)
    if unexpected:
        raise RuntimeError(f"stage-1 parameters without a stage-2 slot: {unexpected}")
    return m2
