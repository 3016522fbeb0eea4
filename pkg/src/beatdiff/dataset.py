"""Synthetic beat-locked dance clips: audio, frames, masks, captions, manifest.

Every clip is a single bright sprite moving over a dark background.  The
soundtrack is a click track (short decaying noise bursts on the beat grid)
over a quiet motion-specific sine tone.  Motion phase is interpolated between
the quantized beat frames, so the pose is in a known configuration exactly on
each beat frame:

  bounce  ball touches the ground (height 0, energy peak) on the beat
  sway    disc at an extreme of its horizontal arc on the beat
  spin    bar back at angle 0 (mod 2*pi) on the beat

Masks are the sprite coverage (supersampled alpha), so foreground pixels are
exactly the pixels that differ from the background.

On disk: one directory per clip with frames/frame_%05d.png (8-bit RGB),
masks/mask_%05d.png (8-bit grayscale), and audio.wav (PCM16 mono 16 kHz);
manifest.json at the root lists every clip with its caption and parameters.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from . import audio
from .conditioning import extract_beats, quantize_beat_times

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

MOTIONS = ("bounce", "sway", "spin")
TONE_HZ = {"bounce": 220.0, "sway": 330.0, "spin": 440.0}
TONE_AMP = 0.1
CLICK_SAMPLES = 80  # 5 ms at 16 kHz
CLICK_DECAY = 16.0
PEAK_LEVEL = 0.9
SUPERSAMPLE = 4

SPRITE_COLORS = [
    (236, 94, 66), (246, 201, 68), (96, 211, 148), (102, 161, 248), (222, 120, 227)]
BACKGROUND_COLORS = [(18, 20, 26), (24, 18, 30), (16, 26, 22), (28, 22, 16)]


@dataclass(frozen=True)
class ClipSpec:
    clip_id: str
    motion_type: str
    bpm: float
    duration_s: float = 4.0
    fps: float = 12.0
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.motion_type not in MOTIONS:
            raise ValueError(f"unknown motion {self.motion_type!r}, expected one of {MOTIONS}")
        if not 60.0 <= self.bpm <= 180.0:
            raise ValueError(f"bpm {self.bpm} outside [60, 180]")
        if self.duration_s <= 0 or self.fps <= 0 or self.image_size <= 0:
            raise ValueError("duration_s, fps, and image_size must be positive")
        frames = self.duration_s * self.fps
        if abs(frames - round(frames)) > 1e-9:
            raise ValueError(f"duration*fps = {frames} is not an integer frame count")

    @property
    def frame_count(self) -> int:
        return int(round(self.duration_s * self.fps))


def sample_clip_specs(n_clips: int, dataset_seed: int, *, duration_s: float = 4.0,
                      fps: float = 12.0, image_size: int = 64) -> List[ClipSpec]:
    """Deterministic spread over motion types and a 60/90/120/150 BPM ladder."""
    if n_clips < 1:
        raise ValueError(f"n_clips must be >= 1, got {n_clips}")
    return [
        ClipSpec(clip_id=f"clip{i:02d}",
                 motion_type=MOTIONS[i % len(MOTIONS)],
                 bpm=60.0 + 30.0 * (i % 4),
                 duration_s=duration_s, fps=fps, image_size=image_size,
                 seed=dataset_seed * 1000 + i)
        for i in range(n_clips)]


# ---- audio --------------------------------------------------------------


def click_sample_indices(bpm: float, duration_s: float,
                         sample_rate: int = audio.SAMPLE_RATE) -> np.ndarray:
    n = int(round(duration_s * sample_rate))
    period = 60.0 / bpm
    out = []
    k = 0
    while True:
        idx = int(round(k * period * sample_rate))
        if idx >= n:
            break
        out.append(idx)
        k += 1
    return np.asarray(out, dtype=np.int64)


def beat_times(bpm: float, duration_s: float) -> np.ndarray:
    period = 60.0 / bpm
    count = int(math.ceil(duration_s / period - 1e-9))
    return np.arange(count, dtype=np.float64) * period


def synth_audio(bpm: float, duration_s: float, *, motion_type: str = "bounce",
                seed: int = 0) -> audio.Waveform:
    """Click train on the beat grid plus a quiet tone whose pitch encodes the
    motion type, peak-normalized to 0.9."""
    sr = audio.SAMPLE_RATE
    n = int(round(duration_s * sr))
    t = np.arange(n, dtype=np.float64) / sr
    samples = TONE_AMP * np.sin(2.0 * np.pi * TONE_HZ[motion_type] * t)
    rng = np.random.default_rng([seed, 0])
    envelope = np.exp(-np.arange(CLICK_SAMPLES, dtype=np.float64) / CLICK_DECAY)
    for idx in click_sample_indices(bpm, duration_s, sr):
        burst = rng.standard_normal(CLICK_SAMPLES) * envelope
        stop = min(idx + CLICK_SAMPLES, n)
        samples[idx:stop] += burst[:stop - idx]
    samples *= PEAK_LEVEL / np.abs(samples).max()
    return audio.Waveform(samples, sr)


def clip_audio(spec: ClipSpec) -> audio.Waveform:
    return synth_audio(spec.bpm, spec.duration_s, motion_type=spec.motion_type,
                       seed=spec.seed)


def beat_frame_grid(spec: ClipSpec) -> np.ndarray:
    """Frame indices of the quantized beat grid (what the tracker should find)."""
    bits = quantize_beat_times(beat_times(spec.bpm, spec.duration_s),
                               spec.fps, spec.frame_count)
    return np.flatnonzero(bits).astype(np.int64)


# ---- video --------------------------------------------------------------


def motion_phase(frame: int, beat_frames: np.ndarray) -> Tuple[int, float]:
    """(beats elapsed, fraction into the current beat interval) for a frame.

    Past the last beat the final interval length keeps extrapolating, so u
    grows beyond 1 instead of the motion freezing.
    """
    b = np.asarray(beat_frames, dtype=np.int64)
    if len(b) < 2:
        raise ValueError("need at least two beat frames to define a phase")
    i = int(np.searchsorted(b, frame, side="right")) - 1
    if i < 0:
        i = 0
    if i >= len(b) - 1:
        i = len(b) - 1
        return i, (frame - b[-1]) / float(b[-1] - b[-2])
    return i, (frame - b[i]) / float(b[i + 1] - b[i])


def sprite_geometry(spec: ClipSpec, frame: int, beat_frames: np.ndarray) -> Dict:
    """Shape placement for one frame, in pixel units."""
    s = float(spec.image_size)
    m, u = motion_phase(frame, beat_frames)
    if spec.motion_type == "bounce":
        radius = 0.14 * s
        ground = 0.82 * s
        height = 0.35 * s * math.sin(math.pi * u)
        return {"kind": "circle", "cx": 0.5 * s, "cy": ground - radius - height,
                "r": radius}
    if spec.motion_type == "sway":
        radius = 0.16 * s
        cx = 0.5 * s + 0.28 * s * math.cos(math.pi * (m + u))
        return {"kind": "circle", "cx": cx, "cy": 0.55 * s, "r": radius}
    theta = 2.0 * math.pi * (m + u)
    return {"kind": "bar", "cx": 0.5 * s, "cy": 0.5 * s, "theta": theta,
            "half_len": 0.30 * s, "half_width": 0.07 * s}


def _coverage(spec: ClipSpec, geom: Dict) -> np.ndarray:
    """Per-pixel sprite coverage in [0, 1] from a SUPERSAMPLE^2 subgrid."""
    s = spec.image_size
    ss = SUPERSAMPLE
    coords = (np.arange(s * ss, dtype=np.float64) + 0.5) / ss
    dx = coords[None, :] - geom["cx"]
    dy = coords[:, None] - geom["cy"]
    if geom["kind"] == "circle":
        inside = dx * dx + dy * dy <= geom["r"] * geom["r"]
    else:
        c, si = math.cos(geom["theta"]), math.sin(geom["theta"])
        along = dx * c + dy * si
        across = -dx * si + dy * c
        inside = (np.abs(along) <= geom["half_len"]) & (np.abs(across) <= geom["half_width"])
    return inside.astype(np.float64).reshape(s, ss, s, ss).mean(axis=(1, 3))


def clip_colors(spec: ClipSpec) -> Tuple[Tuple[int, int, int], Tuple[int, int, int]]:
    rng = np.random.default_rng([spec.seed, 1])
    sprite = SPRITE_COLORS[int(rng.integers(len(SPRITE_COLORS)))]
    background = BACKGROUND_COLORS[int(rng.integers(len(BACKGROUND_COLORS)))]
    return sprite, background


def synth_video(spec: ClipSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Render (frames, masks): uint8 (N, S, S, 3) and float32 coverage (N, S, S)."""
    sprite, background = clip_colors(spec)
    beats = beat_frame_grid(spec)
    frames = np.empty((spec.frame_count, spec.image_size, spec.image_size, 3),
                      dtype=np.uint8)
    masks = np.empty((spec.frame_count, spec.image_size, spec.image_size),
                     dtype=np.float32)
    bg = np.asarray(background, dtype=np.float64)
    fg = np.asarray(sprite, dtype=np.float64)
    for f in range(spec.frame_count):
        alpha = _coverage(spec, sprite_geometry(spec, f, beats))
        rgb = bg[None, None, :] * (1.0 - alpha[..., None]) + fg[None, None, :] * alpha[..., None]
        frames[f] = np.round(rgb).astype(np.uint8)
        masks[f] = alpha.astype(np.float32)
    return frames, masks


def make_caption(spec: ClipSpec) -> str:
    tempo = "slow" if spec.bpm < 80 else ("quick" if spec.bpm > 130 else "steady")
    if spec.motion_type == "bounce":
        return f"the figure bounces up and down in {tempo} rhythm with the beat"
    if spec.motion_type == "sway":
        return f"the figure sways gently from side to side with the {tempo} music"
    return f"the figure spins around in {tempo} time with the music"


# ---- pixel <-> model range ----------------------------------------------


def frames_to_float(frames: np.ndarray) -> np.ndarray:
    """uint8 pixels to float32 in [-1, 1]."""
    return (frames.astype(np.float32) / 127.5) - 1.0


def float_to_frames(images: np.ndarray) -> np.ndarray:
    x = (np.clip(images, -1.0, 1.0) + 1.0) * 127.5
    return np.round(x).astype(np.uint8)


# ---- on-disk corpus -----------------------------------------------------


def save_png(path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(Path(path), format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        return np.asarray(im)


def build_dataset(n_clips: int, dataset_seed: int, out_dir) -> dict:
    """Write an n-clip corpus under out_dir and return its manifest."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in sample_clip_specs(n_clips, dataset_seed):
        clip_dir = root / spec.clip_id
        (clip_dir / "frames").mkdir(parents=True, exist_ok=True)
        (clip_dir / "masks").mkdir(parents=True, exist_ok=True)
        audio.save_wav(clip_dir / "audio.wav", clip_audio(spec))
        frames, masks = synth_video(spec)
        for f in range(spec.frame_count):
            save_png(clip_dir / "frames" / f"frame_{f:05d}.png", frames[f])
            save_png(clip_dir / "masks" / f"mask_{f:05d}.png",
                     np.round(masks[f] * 255.0).astype(np.uint8))
        entries.append({
            "clip_id": spec.clip_id,
            "frame_dir": f"{spec.clip_id}/frames",
            "audio_path": f"{spec.clip_id}/audio.wav",
            "caption": make_caption(spec),
            "bpm": spec.bpm,
            "motion_type": spec.motion_type,
            "fps": spec.fps,
            "frame_count": spec.frame_count,
            "seed": spec.seed,
        })
    manifest = {"format_version": MANIFEST_VERSION, "dataset_seed": dataset_seed,
                "entries": entries}
    (root / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest


def load_manifest(root) -> dict:
    root = Path(root)
    manifest = json.loads((root / MANIFEST_NAME).read_text(encoding="utf-8"))
    version = manifest.get("format_version")
    if version != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest format_version {version!r}")
    return manifest


@dataclass
class Clip:
    """One clip in memory, ready for training."""

    frames: np.ndarray       # uint8 (N, S, S, 3)
    masks: np.ndarray        # float32 (N, S, S) in [0, 1]
    waveform: audio.Waveform
    caption: str
    fps: float
    beat_bits: np.ndarray    # uint8 (N,)

    def __post_init__(self):
        n = self.frames.shape[0]
        if n < 2:
            raise ValueError(f"clip needs at least 2 frames, got {n}")
        if self.masks.shape[0] != n or len(self.beat_bits) != n:
            raise ValueError("frames, masks, and beat_bits must agree on frame count")
        if self.waveform.duration + 1e-9 < n / self.fps:
            raise ValueError(
                f"waveform covers {self.waveform.duration:.3f}s but {n} frames at "
                f"{self.fps} fps need {n / self.fps:.3f}s")

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    @property
    def beat_frames(self) -> np.ndarray:
        return np.flatnonzero(self.beat_bits).astype(np.int64)


def load_clips(root) -> List[Clip]:
    """Load every manifest entry; beat vectors come from the audio via the
    tracking pipeline, not from the manifest's stated BPM."""
    root = Path(root)
    clips = []
    for entry in load_manifest(root)["entries"]:
        n = int(entry["frame_count"])
        fps = float(entry["fps"])
        frames = np.stack([
            load_png(root / entry["frame_dir"] / f"frame_{f:05d}.png") for f in range(n)])
        mask_dir = (root / entry["frame_dir"]).parent / "masks"
        masks = np.stack([
            load_png(mask_dir / f"mask_{f:05d}.png") for f in range(n)])
        w = audio.load_wav(root / entry["audio_path"])
        clips.append(Clip(
            frames=frames,
            masks=masks.astype(np.float32) / 255.0,
            waveform=w,
            caption=entry["caption"],
            fps=fps,
            beat_bits=extract_beats(w, fps, n)))
    return clips


def manifest_digest(root) -> str:
    """sha256 of the manifest bytes, for determinism checks."""
    return hashlib.sha256((Path(root) / MANIFEST_NAME).read_bytes()).hexdigest()
