"""Frame and clip quality metrics.

All pixel metrics take uint8-scale values (peak 255).  The distribution
distance runs over feature vectors in feature space; a pooled U-Net bottleneck
embedding of each frame stands in for a pretrained feature extractor.  Beat
alignment correlates frame-difference motion energy with a slightly widened
beat indicator train.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import frames_to_float

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2
COVARIANCE_SHRINKAGE = 1e-6
BEAT_PULSE = np.array([0.5, 1.0, 0.5])


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB against a 255 peak; inf when equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 20.0 * math.log10(255.0 / math.sqrt(mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, kernel: np.ndarray) -> float:
    size = kernel.shape[0]
    wx = sliding_window_view(x, (size, size))
    wy = sliding_window_view(y, (size, size))
    axes = ([2, 3], [0, 1])
    mu_x = np.tensordot(wx, kernel, axes=axes)
    mu_y = np.tensordot(wy, kernel, axes=axes)
    ex2 = np.tensordot(wx * wx, kernel, axes=axes)
    ey2 = np.tensordot(wy * wy, kernel, axes=axes)
    exy = np.tensordot(wx * wy, kernel, axes=axes)
    var_x = ex2 - mu_x * mu_x
    var_y = ey2 - mu_y * mu_y
    cov = exy - mu_x * mu_y
    s = ((2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)) / (
        (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2))
    return float(s.mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over valid 11x11 Gaussian-weighted windows,
    averaged across channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C), got {a.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}px window")
    kernel = gaussian_window()
    return float(np.mean([
        _ssim_channel(a[..., c], b[..., c], kernel) for c in range(a.shape[2])]))


# ---- distribution distance ----------------------------------------------


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    w, v = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)[None, :]) @ v.T


def frechet_feature_distance(feats_a: np.ndarray, feats_b: np.ndarray,
                             shrinkage: float = COVARIANCE_SHRINKAGE) -> float:
    """Fréchet distance between Gaussians fit to two feature samples."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"need (n, d) feature arrays, got {a.shape} and {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples per side")
    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    eye = np.eye(a.shape[1])
    sig_a = np.cov(a, rowvar=False) + shrinkage * eye
    sig_b = np.cov(b, rowvar=False) + shrinkage * eye
    root_a = _sqrtm_psd(sig_a)
    cross = _sqrtm_psd(root_a @ sig_b @ root_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sig_a + sig_b - 2.0 * cross))
    return max(value, 0.0)


def video_features(model, frames: np.ndarray) -> np.ndarray:
    """Pooled bottleneck embedding of each uint8 frame, shape (N, width)."""
    lats = torch.stack([model.encode_image(img) for img in frames_to_float(frames)])
    with torch.no_grad():
        feats = model.denoiser.features(lats)
    return feats.to(torch.float64).numpy()


# ---- beat alignment -----------------------------------------------------


def motion_energy(frames: np.ndarray) -> np.ndarray:
    """Mean absolute frame difference per frame; the first frame copies the
    second so the series has one entry per frame."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] < 2:
        raise ValueError(f"need (N, H, W, C) with N >= 2, got {x.shape}")
    d = np.abs(np.diff(x, axis=0)).mean(axis=(1, 2, 3))
    return np.concatenate([[d[0]], d])


def beat_alignment(energy: np.ndarray, beat_bits: np.ndarray) -> float:
    """Pearson correlation between motion energy and the widened beat train;
    0.0 when either side has no variance."""
    e = np.asarray(energy, dtype=np.float64)
    bits = np.asarray(beat_bits)
    if e.shape != bits.shape or e.ndim != 1:
        raise ValueError(f"shape mismatch {e.shape} vs {bits.shape}")
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("beat vector must be binary")
    target = np.convolve(bits.astype(np.float64), BEAT_PULSE, mode="same")
    if e.std() == 0.0 or target.std() == 0.0:
        return 0.0
    return float(np.corrcoef(e, target)[0, 1])


def beat_alignment_score(frames: np.ndarray, beat_bits: np.ndarray) -> float:
    """Beat alignment straight from a frame sequence of at least 3 frames."""
    frames = np.asarray(frames)
    if frames.shape[0] < 3:
        raise ValueError(f"need at least 3 frames, got {frames.shape[0]}")
    return beat_alignment(motion_energy(frames), beat_bits)


@dataclass
class MetricReport:
    """Per-clip metric bundle; psnr_db may be the +inf sentinel."""

    psnr_db: float
    ssim: float
    frechet: float
    beat_alignment: float
    n_frames: int

    def to_dict(self) -> dict:
        return asdict(self)
