"""Cross-attention fusion, inner-product scoring and the recommendation loss."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class CrossAttentionFusion(nn.Module):
    """Single-head attention of one query vector over a key/value sequence."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.W_Q = nn.Linear(d, d, bias=False)
        self.W_K = nn.Linear(d, d, bias=False)
        self.W_V = nn.Linear(d, d, bias=False)

    def attention_weights(self, query, keys, mask=None) -> torch.Tensor:
        q = self.W_Q(query).unsqueeze(1)
        k = self.W_K(keys)
        logits = (q * k).sum(-1) / math.sqrt(self.d)
        if mask is not None:
            logits = logits.masked_fill(~mask, float("-inf"))
        return torch.softmax(logits, dim=-1)

    def forward(self, query: torch.Tensor, keys: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """query (B, d), keys (B, p, d), mask (B, p) -> fused (B, d)."""
        w = self.attention_weights(query, keys, mask)
        return (w.unsqueeze(-1) * self.W_V(keys)).sum(1)


class LinearFusion(nn.Module):
    """Concatenate-and-project fusion, the no-attention baseline."""

    def __init__(self, d: int):
        super().__init__()
        self.proj = nn.Linear(2 * d, d)

    def forward(self, spatial, temporal):
        return self.proj(torch.cat([spatial, temporal], dim=-1))


def fuse(fusion: CrossAttentionFusion, e_spa_u: torch.Tensor, temporal_seq: torch.Tensor,
         mask: torch.Tensor | None = None) -> torch.Tensor:
    return fusion(e_spa_u, temporal_seq, mask)


def score(e_final: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
    """Inner products; ``candidates`` is (c, d) or batched (B, c, d)."""
    if candidates.ndim == 2:
        return e_final @ candidates.T
    return (e_final.unsqueeze(1) * candidates).sum(-1)


def rec_loss(logits: torch.Tensor, labels: torch.Tensor, lam: float = 0.0, params=()) -> torch.Tensor:
    """Binary cross-entropy on sigmoid(logits), summed over each instance's
    candidates and averaged over instances, plus ``lam`` * squared L2 norm."""
    bce = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="none")
    loss = bce.sum(-1).mean() if bce.ndim > 1 else bce.sum()
    if lam:
        loss = loss + lam * sum((p ** 2).sum() for p in params)
    return loss
