"""Small pre-LN transformer pieces that expose per-head attention maps."""
from __future__ import annotations

import math

import torch
from torch import nn


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None):
        """x: [B, S, D]; mask: bool [B, S, S] (True = may attend) or None.

        Returns (output, attention [B, H, S, S]).
        """
        B, S, D = x.shape
        q, k, v = self.qkv(x).view(B, S, 3, self.heads, self.d_head).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None], float("-inf"))
        attn = scores.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, S, D)
        return self.out(y), attn


class Block(nn.Module):
    def __init__(self, d_model: int, heads: int, d_ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(self, x, mask=None):
        a, attn = self.attn(self.ln1(x), mask)
        x = x + a
        x = x + self.ff(self.ln2(x))
        return x, attn


def causal_mask(lengths: torch.Tensor, size: int) -> torch.Tensor:
    """Causal + key-padding mask, bool [B, S, S]."""
    idx = torch.arange(size)
    valid = idx[None, :] < lengths[:, None]
    causal = idx[None, :, None] >= idx[None, None, :]
    return causal & valid[:, None, :]


def padding_mask(valid: torch.Tensor) -> torch.Tensor:
    """valid: bool [B, S] -> bool [B, S, S] letting every query see the valid keys."""
    return valid[:, None, :].expand(-1, valid.shape[1], -1)
