"""Conformer layers with relative positional self-attention."""
from __future__ import annotations

import math

import torch
from torch import nn


def relative_sinusoids(length: int, dim: int, device=None, dtype=None) -> torch.Tensor:
    """Sinusoidal embeddings for relative offsets ``length-1 .. -(length-1)``; (2L-1, dim)."""
    pos = torch.arange(length - 1, -length, -1, device=device, dtype=torch.float32)
    div = torch.exp(torch.arange(0, dim, 2, device=device, dtype=torch.float32)
                    * (-math.log(10000.0) / dim))
    pe = torch.zeros(2 * length - 1, dim, device=device)
    pe[:, 0::2] = torch.sin(pos[:, None] * div)
    pe[:, 1::2] = torch.cos(pos[:, None] * div[: dim // 2])
    return pe.to(dtype or torch.float32)


class RelPositionMultiHeadAttention(nn.Module):
    """Self-attention with content and position biases (Transformer-XL scoring)."""

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.h = n_heads
        self.d_k = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.pos = nn.Linear(d_model, d_model, bias=False)
        self.pos_bias_u = nn.Parameter(torch.zeros(n_heads, self.d_k))
        self.pos_bias_v = nn.Parameter(torch.zeros(n_heads, self.d_k))
        nn.init.xavier_uniform_(self.pos_bias_u)
        nn.init.xavier_uniform_(self.pos_bias_v)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pos_emb: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        q = self.q(x).view(b, t, self.h, self.d_k)
        k = self.k(x).view(b, t, self.h, self.d_k).transpose(1, 2)
        v = self.v(x).view(b, t, self.h, self.d_k).transpose(1, 2)
        p = self.pos(pos_emb).view(-1, self.h, self.d_k).transpose(0, 1)  # (h, 2T-1, d_k)

        content = (q + self.pos_bias_u).transpose(1, 2) @ k.transpose(-2, -1)
        position = (q + self.pos_bias_v).transpose(1, 2) @ p.transpose(-2, -1)  # (B, h, T, 2T-1)
        # entry [i, j] needs offset i - j, stored at column (T-1) - (i - j)
        idx = (t - 1) - torch.arange(t, device=x.device)[:, None] + torch.arange(t, device=x.device)
        position = position.gather(-1, idx.expand(b, self.h, t, t))

        attn = torch.softmax((content + position) / math.sqrt(self.d_k), dim=-1)
        ctx = (self.drop(attn) @ v).transpose(1, 2).reshape(b, t, -1)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, mult: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(d_model), nn.Linear(d_model, mult * d_model), nn.SiLU(),
            nn.Dropout(dropout), nn.Linear(mult * d_model, d_model), nn.Dropout(dropout))

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    def __init__(self, d_model: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.pw1 = nn.Conv1d(d_model, 2 * d_model, 1)
        self.dw = nn.Conv1d(d_model, d_model, kernel, padding=kernel // 2, groups=d_model)
        self.bn = nn.BatchNorm1d(d_model)
        self.pw2 = nn.Conv1d(d_model, d_model, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        y = self.norm(x).transpose(1, 2)
        y = nn.functional.glu(self.pw1(y), dim=1)
        y = nn.functional.silu(self.bn(self.dw(y)))
        return self.drop(self.pw2(y)).transpose(1, 2)


class ConformerLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, kernel: int = 15, ff_mult: int = 4,
                 dropout: float = 0.1):
        super().__init__()
        self.ff1 = FeedForward(d_model, ff_mult, dropout)
        self.attn_norm = nn.LayerNorm(d_model)
        self.attn = RelPositionMultiHeadAttention(d_model, n_heads, dropout)
        self.attn_drop = nn.Dropout(dropout)
        self.conv = ConvModule(d_model, kernel, dropout)
        self.ff2 = FeedForward(d_model, ff_mult, dropout)
        self.final_norm = nn.LayerNorm(d_model)

    def forward(self, x, pos_emb):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn_drop(self.attn(self.attn_norm(x), pos_emb))
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


class Conformer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, n_layers: int, kernel: int = 15,
                 ff_mult: int = 4, dropout: float = 0.1):
        super().__init__()
        self.d_model = d_model
        self.layers = nn.ModuleList(
            ConformerLayer(d_model, n_heads, kernel, ff_mult, dropout) for _ in range(n_layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pos_emb = relative_sinusoids(x.shape[1], self.d_model, x.device, x.dtype)
        for layer in self.layers:
            x = layer(x, pos_emb)
        return x
