"""Shared neural building blocks: attention and sinusoidal embeddings."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn


def sinusoidal_embedding(positions, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Classic sine/cosine features for integer positions, shape (n, dim)."""
    pos = torch.as_tensor(positions, dtype=dtype).reshape(-1)
    half = max(dim // 2, 1)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = pos[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if emb.shape[1] < dim:
        emb = torch.cat([emb, torch.zeros(len(pos), dim - emb.shape[1], dtype=dtype)], dim=1)
    return emb[:, :dim]


class Attention(nn.Module):
    """Pre-norm multi-head attention.

    Self-attention when no key/value source is given, cross-attention
    otherwise (queries from x, keys/values from kv).  The output projection
    carries no bias, so zero-initializing it (zero_out=True) makes forward()
    the exact identity on x at construction time.
    """

    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None,
                 zero_out: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(kv_dim if kv_dim is not None else dim, dim)
        self.to_v = nn.Linear(kv_dim if kv_dim is not None else dim, dim)
        self.to_out = nn.Linear(dim, dim, bias=False)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)

    def attend(self, x: torch.Tensor, kv: Optional[torch.Tensor] = None,
               pos: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Attention branch without the residual add; shape preserved."""
        h = self.norm(x)
        if pos is not None:
            h = h + pos
        source = h if kv is None else kv
        q, k, v = self.to_q(h), self.to_k(source), self.to_v(source)
        b, n, d = q.shape
        m = k.shape[1]
        dh = d // self.heads
        q = q.view(b, n, self.heads, dh).transpose(1, 2)
        k = k.view(b, m, self.heads, dh).transpose(1, 2)
        v = v.view(b, m, self.heads, dh).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        return self.to_out(out)

    def forward(self, x: torch.Tensor, kv: Optional[torch.Tensor] = None,
                pos: Optional[torch.Tensor] = None) -> torch.Tensor:
        return x + self.attend(x, kv=kv, pos=pos)
