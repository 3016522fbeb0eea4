"""Temporal modules attached at each attention site for clip-mode denoising.

Hidden states live in two views: spatial (K, HW, d), one row of spatial tokens
per frame, and temporal (HW, K, d), one row of frames per spatial position.
Here both carry a leading batch dimension.  Every module ends in a
zero-initialized output projection, so a freshly attached module is an exact
identity and clip-mode denoising starts out equal to frame-mode denoising.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn

from .layers import Attention, sinusoidal_embedding


def to_temporal_view(x: torch.Tensor) -> torch.Tensor:
    """(B, K, HW, d) -> (B, HW, K, d)."""
    if x.dim() != 4:
        raise ValueError(f"expected rank-4 hidden states, got {tuple(x.shape)}")
    return x.transpose(1, 2)


def to_spatial_view(x: torch.Tensor) -> torch.Tensor:
    """(B, HW, K, d) -> (B, K, HW, d)."""
    if x.dim() != 4:
        raise ValueError(f"expected rank-4 hidden states, got {tuple(x.shape)}")
    return x.transpose(1, 2)


class MusicModule(nn.Module):
    """Per-frame cross-attention over music tokens, then self-attention along
    the frame axis with sinusoidal temporal positions."""

    def __init__(self, width: int, cond_dim: int, heads: int, use_positions: bool = True):
        super().__init__()
        self.cross = Attention(width, heads, kv_dim=cond_dim, zero_out=True)
        self.temporal = Attention(width, heads, zero_out=True)
        self.use_positions = use_positions

    def _temporal_positions(self, k: int, dim: int, dtype) -> Optional[torch.Tensor]:
        if not self.use_positions:
            return None
        return sinusoidal_embedding(torch.arange(k), dim, dtype=dtype)

    def forward(self, hidden: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        b, k, hw, d = hidden.shape
        if tokens.dim() == 2:
            tokens = tokens[None]
        x = hidden.reshape(b * k, hw, d)
        kv = tokens[:, None].expand(tokens.shape[0], k, *tokens.shape[1:])
        kv = kv.reshape(-1, *tokens.shape[1:])
        if kv.shape[0] != b * k:
            kv = kv.expand(b * k, *kv.shape[1:])
        x = self.cross(x, kv=kv).reshape(b, k, hw, d)
        t = to_temporal_view(x).reshape(b * hw, k, d)
        pos = self._temporal_positions(k, d, t.dtype)
        t = self.temporal(t, pos=pos)
        return to_spatial_view(t.reshape(b, hw, k, d))


class BeatModule(MusicModule):
    """Same two-step structure, but keys/values are the per-frame beat rows."""

    def forward(self, hidden: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        k = hidden.shape[1]
        rows = tokens.shape[-2]
        if rows != k:
            raise ValueError(f"beat embedding has {rows} rows for {k} frames")
        return super().forward(hidden, tokens)


class MotionModule(nn.Module):
    """Temporal self-attention over context frames prepended to the clip.

    The context holds hidden states of the M frames preceding this clip at the
    same site; positions run over the concatenated axis and only the last K
    outputs feed the residual, so the context steers but is never rewritten.
    """

    def __init__(self, width: int, heads: int, use_positions: bool = True):
        super().__init__()
        self.attn = Attention(width, heads, zero_out=True)
        self.use_positions = use_positions

    def forward(self, hidden: torch.Tensor,
                context: Optional[torch.Tensor] = None) -> torch.Tensor:
        b, k, hw, d = hidden.shape
        t = to_temporal_view(hidden).reshape(b * hw, k, d)
        m = 0
        full = t
        if context is not None and context.shape[-2] > 0:
            if context.dim() == 3:
                context = context[None]
            if context.shape[1] != hw or context.shape[3] != d:
                raise ValueError(
                    f"context shape {tuple(context.shape)} incompatible with "
                    f"hidden {tuple(hidden.shape)}")
            m = context.shape[2]
            ctx = context.expand(b, hw, m, d).reshape(b * hw, m, d)
            full = torch.cat([ctx, t], dim=1)
        pos = None
        if self.use_positions:
            pos = sinusoidal_embedding(torch.arange(m + k), d, dtype=t.dtype)
        out = self.attn.attend(full, pos=pos)
        t = t + out[:, m:]
        return to_spatial_view(t.reshape(b, hw, k, d))
