"""The full recommender: RGAT spatial encoder, KANsformer, fusion, scoring."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from examrec.fusion import CrossAttentionFusion, LinearFusion, score
from examrec.kansformer import TemporalEncoder, masked_mean, pad_sequences
from examrec.rgat import RGAT, EdgeIndex, graph_edges

FUSION_MODES = ("spatial_query", "temporal_query", "pooled", "linear")


class ExamRecommender(nn.Module):
    def __init__(self, n_entities: int, n_patients: int, config):
        super().__init__()
        c = config
        if c.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {c.fusion!r}")
        d = c.embed_dim
        self.n_entities = n_entities
        self.n_patients = n_patients
        self.use_rgat = c.use_rgat
        self.use_kansformer = c.use_kansformer
        self.fusion_mode = c.fusion
        self.rgat = RGAT(n_entities + n_patients, d, c.rgat_layers, c.dropout)
        self.temporal = TemporalEncoder(
            d, n_blocks=c.kan_blocks, n_heads=c.n_heads, d_ff=c.ff_dim or 2 * d, max_len=c.max_len,
            dropout=c.dropout, grid_size=c.kan_grid, order=c.kan_order, grid_range=c.kan_range,
        )
        if c.fusion == "linear":
            self.fusion = LinearFusion(d)
        else:
            self.fusion = CrossAttentionFusion(d)
        self.edges: EdgeIndex | None = None

    def set_graph(self, adjacency: np.ndarray, entity_category: np.ndarray):
        self.edges = graph_edges(adjacency, entity_category)

    def spatial(self) -> torch.Tensor:
        """Spatial embeddings of every node (entities first, then patients)."""
        if not self.use_rgat:
            return self.rgat.nodes
        return self.rgat(self.edges)[0]

    def encode(self, e_spa: torch.Tensor, patient_rows: torch.Tensor, seq_ids: torch.Tensor,
               mask: torch.Tensor) -> torch.Tensor:
        tokens = e_spa[seq_ids]
        if self.use_kansformer:
            H, e_tem = self.temporal(tokens, mask)
            kv_mask = mask
        else:
            e_tem = masked_mean(self.temporal.embed(tokens, mask), mask)
            H = e_tem.unsqueeze(1)
            kv_mask = None
        e_u = e_spa[self.n_entities + patient_rows]
        if self.fusion_mode == "spatial_query":
            return self.fusion(e_u, H, kv_mask)
        if self.fusion_mode == "pooled":
            return self.fusion(e_u, e_tem.unsqueeze(1))
        if self.fusion_mode == "temporal_query":
            return self.fusion(e_tem, tokens, mask)
        return self.fusion(e_u, e_tem)

    def forward(self, patient_rows, seq_ids, mask, candidates, e_spa=None) -> torch.Tensor:
        """Scores (B, c) for candidate entity ids (B, c)."""
        if e_spa is None:
            e_spa = self.spatial()
        e_final = self.encode(e_spa, patient_rows, seq_ids, mask)
        return score(e_final, e_spa[candidates])

    @torch.no_grad()
    def score_lists(self, patient_rows, sequences, candidates, batch_size: int = 512) -> list[np.ndarray]:
        """Evaluation helper: ragged candidate lists in, ragged score arrays out."""
        was_training = self.training
        self.eval()
        e_spa = self.spatial()
        out = []
        for lo in range(0, len(sequences), batch_size):
            seqs = sequences[lo:lo + batch_size]
            cands = candidates[lo:lo + batch_size]
            ids, mask = pad_sequences(seqs, self.temporal.max_len)
            width = max(len(c) for c in cands)
            cand = torch.zeros((len(cands), width), dtype=torch.long)
            for i, c in enumerate(cands):
                cand[i, : len(c)] = torch.as_tensor(c, dtype=torch.long)
            rows = torch.as_tensor(patient_rows[lo:lo + batch_size], dtype=torch.long)
            s = self(rows, ids, mask, cand, e_spa=e_spa).numpy().astype(np.float64)
            out.extend(s[i, : len(c)] for i, c in enumerate(cands))
        self.train(was_training)
        return out
