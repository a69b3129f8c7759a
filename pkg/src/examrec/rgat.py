"""Relation-aware graph attention over the patient-entity graph.

Node ids: entities keep their vocabulary ids, patient row ``r`` becomes node
``n_entities + r``.  Every patient-entity edge is used in both directions;
the inverse direction gets its own relation type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

N_FORWARD_RELATIONS = 5
N_RELATIONS = 2 * N_FORWARD_RELATIONS


@dataclass
class EdgeIndex:
    """Directed edges ``src -> dst``: ``dst`` aggregates messages from ``src``."""

    dst: torch.Tensor
    src: torch.Tensor
    rel: torch.Tensor
    n_nodes: int


def graph_edges(adjacency: np.ndarray, entity_category: np.ndarray) -> EdgeIndex:
    n_patients, n_entities = adjacency.shape
    rows, cols = np.nonzero(adjacency)
    patients = n_entities + rows
    cats = entity_category[cols]
    dst = np.concatenate([patients, cols])
    src = np.concatenate([cols, patients])
    rel = np.concatenate([cats, cats + N_FORWARD_RELATIONS])
    as_t = lambda a: torch.as_tensor(a, dtype=torch.long)  # noqa: E731
    return EdgeIndex(as_t(dst), as_t(src), as_t(rel), n_entities + n_patients)


def segment_softmax(logits: torch.Tensor, segment: torch.Tensor, n_segments: int) -> torch.Tensor:
    shift = torch.full((n_segments,), float("-inf"), dtype=logits.dtype)
    shift = shift.scatter_reduce(0, segment, logits.detach(), reduce="amax", include_self=True)
    ex = torch.exp(logits - shift[segment])
    denom = torch.zeros(n_segments, dtype=logits.dtype).index_add_(0, segment, ex)
    return ex / denom[segment]


class RGAT(nn.Module):
    def __init__(self, n_nodes: int, d: int, n_layers: int = 2, dropout: float = 0.1,
                 negative_slope: float = 0.2):
        super().__init__()
        if n_layers < 1:
            raise ValueError("need at least one RGAT layer")
        self.d = d
        self.n_layers = n_layers
        self.negative_slope = negative_slope
        bound = 1.0 / math.sqrt(d)
        self.nodes = nn.Parameter(torch.empty(n_nodes, d).uniform_(-bound, bound))
        self.relations = nn.Parameter(torch.empty(N_RELATIONS, d).uniform_(-bound, bound))
        self.W = nn.ParameterList(
            nn.Parameter(nn.init.xavier_uniform_(torch.empty(d, 2 * d))) for _ in range(n_layers)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(n_layers))
        self.drop = nn.Dropout(dropout)

    def attention_weights(self, layer: int, x: torch.Tensor, edges: EdgeIndex) -> torch.Tensor:
        """Softmax over each destination's neighborhood of LeakyReLU(r^T W [x_dst || x_src])."""
        z = torch.cat([x[edges.dst], x[edges.src]], dim=-1) @ self.W[layer].T
        logits = F.leaky_relu((z * self.relations[edges.rel]).sum(-1), self.negative_slope)
        return segment_softmax(logits, edges.dst, edges.n_nodes)

    def layer(self, layer: int, x: torch.Tensor, edges: EdgeIndex) -> torch.Tensor:
        alpha = self.attention_weights(layer, x, edges)
        msg = torch.zeros_like(x).index_add_(0, edges.dst, alpha.unsqueeze(-1) * x[edges.src])
        return self.drop(self.norms[layer](x + msg))

    def forward(self, edges: EdgeIndex) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Return the layer sum e_spa = x^1 + ... + x^L and the per-layer outputs."""
        x = self.nodes
        outs = []
        for l in range(self.n_layers):
            x = self.layer(l, x, edges)
            outs.append(x)
        return torch.stack(outs).sum(0), outs


def spatial_encode(model: RGAT, edges: EdgeIndex) -> torch.Tensor:
    return model(edges)[0]
