"""Transformer encoder whose projections and feed-forward are KAN layers."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from examrec.kan import KanLayer


class KansformerBlock(nn.Module):
    """Bidirectional multi-head self-attention + two-layer KAN feed-forward.

    Both sub-blocks are wrapped in a residual connection followed by layer
    normalization.  Q/K/V are single d -> d KAN layers; head ``j`` reads the
    ``j``-th slice of their outputs, which is the same map as a separate
    d -> d/n_heads KAN per head.
    """

    def __init__(self, d: int, n_heads: int = 2, d_ff: int | None = None, dropout: float = 0.1,
                 grid_size: int = 5, order: int = 3, grid_range: float = 1.0):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        d_ff = d_ff or 2 * d
        if d_ff < d:
            raise ValueError("d_ff must be >= d")
        kan = dict(grid_size=grid_size, order=order, grid_range=grid_range)
        self.d, self.n_heads = d, n_heads
        self.q = KanLayer(d, d, **kan)
        self.k = KanLayer(d, d, **kan)
        self.v = KanLayer(d, d, **kan)
        self.ff1 = KanLayer(d, d_ff, **kan)
        self.ff2 = KanLayer(d_ff, d, **kan)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def _split(self, x):
        B, p, _ = x.shape
        return x.view(B, p, self.n_heads, self.d // self.n_heads).transpose(1, 2)

    def attention_weights(self, H: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Row-softmax attention, shape (B, heads, p, p)."""
        q, k = self._split(self.q(H)), self._split(self.k(H))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d / self.n_heads)
        if mask is not None:
            logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
        return torch.softmax(logits, dim=-1)

    def forward(self, H: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if H.shape[1] == 0:
            raise ValueError("empty sequence")
        attn = self.attention_weights(H, mask)
        heads = attn @ self._split(self.v(H))
        B, _, p, _ = heads.shape
        mixed = heads.transpose(1, 2).reshape(B, p, self.d)
        A = self.norm1(H + self.drop(mixed))
        ff = F.gelu(self.ff2(self.ff1(A)))
        return self.norm2(A + self.drop(ff))


def pad_sequences(sequences, max_len: int, pad: int = 0):
    """Right-pad integer sequences, keeping the most recent ``max_len`` items.

    Returns (ids, mask) as (B, p) tensors.
    """
    seqs = [list(s)[-max_len:] for s in sequences]
    if any(len(s) == 0 for s in seqs):
        raise ValueError("empty sequence")
    p = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), p), pad, dtype=torch.long)
    mask = torch.zeros((len(seqs), p), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


def last_valid(H: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    idx = mask.sum(dim=1) - 1
    return H[torch.arange(H.shape[0]), idx]


def masked_mean(H: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.unsqueeze(-1).to(H.dtype)
    return (H * m).sum(dim=1) / m.sum(dim=1)


class TemporalEncoder(nn.Module):
    """Adds learnable position embeddings and runs ``n_blocks`` KANsformer blocks."""

    def __init__(self, d: int, n_blocks: int = 2, n_heads: int = 2, d_ff: int | None = None,
                 max_len: int = 64, dropout: float = 0.1, grid_size: int = 5, order: int = 3,
                 grid_range: float = 1.0):
        super().__init__()
        self.max_len = max_len
        self.position = nn.Embedding(max_len, d)
        bound = 1.0 / math.sqrt(d)
        nn.init.uniform_(self.position.weight, -bound, bound)
        self.blocks = nn.ModuleList(
            KansformerBlock(d, n_heads, d_ff, dropout, grid_size, order, grid_range) for _ in range(n_blocks)
        )

    def embed(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """h_i = e_i + b_i on valid positions, zero on padding."""
        pos = torch.arange(tokens.shape[1])
        H = tokens + self.position(pos)[None]
        return H * mask.unsqueeze(-1).to(H.dtype)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return the output sequence and the last valid position's vector."""
        H = self.embed(tokens, mask)
        for block in self.blocks:
            H = block(H, mask)
        return H, last_valid(H, mask)


def temporal_encode(tokens: torch.Tensor, mask: torch.Tensor, encoder: TemporalEncoder) -> torch.Tensor:
    return encoder(tokens, mask)[1]
