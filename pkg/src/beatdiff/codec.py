"""Exactly invertible image/latent codec.

Space-to-depth on non-overlapping p x p patches followed by a fixed seeded
orthonormal channel mixing. There is nothing learned here: the codec is a
deterministic linear bijection (up to the final clamp on decode), so encode
preserves L2 norms and decode(encode(x)) returns x exactly for in-range images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _orthonormal(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    # Fix the sign ambiguity of QR so the matrix is a pure function of the seed.
    q = q * np.sign(np.diag(r))[None, :]
    return q


@dataclass
class CodecConfig:
    patch_factor: int = 4
    seed: int = 0
    mixing: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.patch_factor < 1:
            raise ValueError(f"patch_factor must be >= 1, got {self.patch_factor}")
        if self.mixing is None:
            self.mixing = _orthonormal(self.latent_channels, self.seed)

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch_factor * self.patch_factor


def encode(image: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Map an (H, W, 3) image in [-1, 1] to an (H/p, W/p, 3p^2) latent."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    p = cfg.patch_factor
    h, w, _ = image.shape
    if h % p or w % p:
        raise ValueError(f"image size {h}x{w} not divisible by patch factor {p}")
    patches = image.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4)
    flat = patches.reshape(h // p, w // p, cfg.latent_channels)
    latent = flat @ cfg.mixing.T
    return latent.astype(np.float32)


def decode(latent: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Invert encode() and clamp the result to [-1, 1]."""
    latent = np.asarray(latent, dtype=np.float64)
    c = cfg.latent_channels
    if latent.ndim != 3 or latent.shape[2] != c:
        raise ValueError(f"expected (H', W', {c}) latent, got shape {latent.shape}")
    p = cfg.patch_factor
    hh, ww, _ = latent.shape
    flat = latent @ cfg.mixing
    patches = flat.reshape(hh, ww, p, p, 3).transpose(0, 2, 1, 3, 4)
    image = patches.reshape(hh * p, ww * p, 3)
    return np.clip(image, -1.0, 1.0).astype(np.float32)
