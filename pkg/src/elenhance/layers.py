"""Small torch building blocks shared by the recognizer, aligner and decoder."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def lengths_to_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    """Boolean (B, T) mask, True on valid positions."""
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def causal_mask(size: int, device=None) -> torch.Tensor:
    """Boolean (T, T) mask, True where attention is allowed."""
    return torch.ones(size, size, dtype=torch.bool, device=device).tril()


def pad_list(seqs, pad_value=0.0, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    tensors = [torch.as_tensor(s, dtype=dtype) for s in seqs]
    lengths = torch.tensor([t.shape[0] for t in tensors], dtype=torch.long)
    out = torch.full((len(tensors), int(lengths.max()), *tensors[0].shape[1:]), pad_value, dtype=dtype)
    for i, t in enumerate(tensors):
        out[i, : t.shape[0]] = t
    return out, lengths


def sinusoid_table(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64, device=device)[:, None]
    inv = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64, device=device) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64, device=device)
    table[:, 0::2] = torch.sin(pos * inv)
    table[:, 1::2] = torch.cos(pos * inv[: dim // 2])
    return table.to(dtype)


class ScaledPositionalEncoding(nn.Module):
    """x + alpha * PE, with a learnable scale as in Transformer-TTS."""

    def __init__(self, dim: int, dropout: float = 0.0):
        super().__init__()
        self.dim = dim
        self.alpha = nn.Parameter(torch.ones(1))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, offset: int = 0) -> torch.Tensor:
        pe = sinusoid_table(offset + x.shape[1], self.dim, x.dtype, x.device)[offset:]
        return self.dropout(x + self.alpha * pe[None])


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, value, mask=None, return_weights=False):
        """``mask`` broadcasts to (B, Tq, Tk); True marks allowed positions."""
        b, tq, d = query.shape
        tk = key.shape[1]
        h = self.heads

        def split(x, t):
            return x.view(b, t, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(query), tq), split(self.k(key), tk), split(self.v(value), tk)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        if mask is not None:
            # fully masked rows (padding queries) give NaN; zero them
            weights = weights.masked_fill(~mask[:, None], 0.0)
        out = (self.dropout(weights) @ v).transpose(1, 2).reshape(b, tq, d)
        out = self.o(out)
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0, activation=nn.GELU):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), activation(), nn.Dropout(dropout), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim, heads, ff, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, h, mask))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    """Pre-norm causal self-attention + cross-attention block."""

    def __init__(self, dim, heads, ff, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, dropout)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory, self_mask, cross_mask, return_weights=False):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, h, self_mask))
        h = self.norm2(x)
        ctx, w = self.cross_attn(h, memory, memory, cross_mask, return_weights=True)
        x = x + self.drop(ctx)
        x = x + self.drop(self.ff(self.norm3(x)))
        return (x, w) if return_weights else x


class ConvModule(nn.Module):
    """Conformer convolution module (LayerNorm in place of BatchNorm)."""

    def __init__(self, dim, kernel_size=15, dropout=0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Conv1d(dim, 2 * dim, 1)
        self.dw = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.norm2 = nn.LayerNorm(dim)
        self.pw2 = nn.Conv1d(dim, dim, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, valid):
        # valid: (B, T) bool
        h = self.norm(x).transpose(1, 2)
        h = F.glu(self.pw1(h), dim=1)
        h = h * valid[:, None, :].to(h.dtype)
        h = self.dw(h).transpose(1, 2)
        h = F.silu(self.norm2(h)).transpose(1, 2)
        return self.drop(self.pw2(h).transpose(1, 2))


class ConformerBlock(nn.Module):
    def __init__(self, dim, heads, ff, kernel_size=15, dropout=0.0):
        super().__init__()
        self.ff1_norm = nn.LayerNorm(dim)
        self.ff1 = FeedForward(dim, ff, dropout, activation=nn.SiLU)
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.conv = ConvModule(dim, kernel_size, dropout)
        self.ff2_norm = nn.LayerNorm(dim)
        self.ff2 = FeedForward(dim, ff, dropout, activation=nn.SiLU)
        self.out_norm = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, valid):
        mask = valid[:, None, :]
        x = x + 0.5 * self.drop(self.ff1(self.ff1_norm(x)))
        h = self.attn_norm(x)
        x = x + self.drop(self.attn(h, h, h, mask))
        x = x + self.conv(x, valid)
        x = x + 0.5 * self.drop(self.ff2(self.ff2_norm(x)))
        return self.out_norm(x)


def freeze_scopes(module: nn.Module, scopes) -> list[str]:
    """Disable gradients for parameters whose name starts with any scope."""
    frozen = []
    for name, p in module.named_parameters():
        if any(name == s or name.startswith(s + ".") for s in scopes):
            p.requires_grad_(False)
            frozen.append(name)
    return frozen
