"""Leave-one-out ranking evaluation with sampled negatives."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from examrec.ehr_graph import Dataset, Split, sample_negatives
from examrec.errors import ProtocolError

# score_fn(patient_ids, candidate_lists) -> list of score arrays
ScoreFn = Callable[[Sequence[int], Sequence[Sequence[int]]], Sequence[np.ndarray]]


def rank_of(candidates: Sequence[int], scores: Sequence[float], target: int) -> int:
    """1-based rank of ``target``; higher score first, ties to the lower id."""
    ids = np.asarray(candidates)
    s = np.asarray(scores, dtype=np.float64)
    hit = np.flatnonzero(ids == target)
    if len(hit) != 1:
        raise ProtocolError(f"target {target} must occur exactly once among candidates")
    st = s[hit[0]]
    return 1 + int(np.sum(s > st) + np.sum((s == st) & (ids < target)))


def ranked(candidates: Sequence[int], scores: Sequence[float]) -> list[int]:
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i]))
    return [candidates[i] for i in order]


def _rank_in_list(ranked_ids: Sequence[int], target: int) -> int:
    if len(set(ranked_ids)) != len(ranked_ids):
        raise ProtocolError("candidates must be distinct")
    try:
        return list(ranked_ids).index(target) + 1
    except ValueError:
        raise ProtocolError(f"target {target} not among candidates") from None


def hit_at_k(ranked_ids: Sequence[int], target: int, K: int) -> int:
    return int(_rank_in_list(ranked_ids, target) <= K)


def ndcg_at_k(ranked_ids: Sequence[int], target: int, K: int) -> float:
    r = _rank_in_list(ranked_ids, target)
    return 1.0 / math.log2(r + 1) if r <= K else 0.0


@dataclass
class MetricRecord:
    hr: dict[int, float]
    ndcg: dict[int, float]
    ranks: dict[int, int] = field(default_factory=dict)
    n_short: int = 0

    @classmethod
    def from_ranks(cls, ranks: dict[int, int], ks=(5, 10), n_short: int = 0) -> "MetricRecord":
        r = np.array(list(ranks.values()), dtype=np.float64)
        if len(r) == 0:
            return cls({k: 0.0 for k in ks}, {k: 0.0 for k in ks}, {}, n_short)
        hr = {k: float(np.mean(r <= k)) for k in ks}
        ndcg = {k: float(np.mean(np.where(r <= k, 1.0 / np.log2(r + 1), 0.0))) for k in ks}
        return cls(hr, ndcg, dict(ranks), n_short)

    def as_rows(self) -> list[tuple[str, int, float]]:
        rows = [("HR", k, v) for k, v in self.hr.items()]
        return rows + [("NDCG", k, v) for k, v in self.ndcg.items()]

    def summary(self) -> str:
        parts = [f"HR@{k}={v:.4f}" for k, v in self.hr.items()]
        parts += [f"NDCG@{k}={v:.4f}" for k, v in self.ndcg.items()]
        text = "  ".join(parts) + f"  (patients={len(self.ranks)}"
        return text + (f", short candidate lists={self.n_short})" if self.n_short else ")")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "K", "value"])
            for name, k, v in self.as_rows():
                w.writerow([name, k, f"{v:.6f}"])

    def write_ranks(self, path, targets: dict[int, int] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "target", "rank"])
            for pid, r in sorted(self.ranks.items()):
                w.writerow([pid, (targets or {}).get(pid, ""), r])


def candidate_lists(split: Split, n_negatives: int = 99, seed: int = 0,
                    full_catalog: bool = False) -> tuple[list[int], list[list[int]], int]:
    """Target followed by its negatives, per test patient.

    Each patient draws from its own seeded stream, so lists do not depend on
    evaluation order.
    """
    pids, cands, short = [], [], 0
    for pid, target in split.test:
        if full_catalog:
            negs = sample_negatives(pid, split, split.train.vocab.n_exams, np.random.default_rng(0))
            negs.sort()
        else:
            negs = sample_negatives(pid, split, n_negatives, np.random.default_rng([seed, pid]))
            short += len(negs) < n_negatives
        pids.append(pid)
        cands.append([target] + negs)
    return pids, cands, short


def evaluate(score_fn: ScoreFn, split: Split, n_negatives: int = 99, seed: int = 0,
             ks=(5, 10), full_catalog: bool = False) -> MetricRecord:
    pids, cands, short = candidate_lists(split, n_negatives, seed, full_catalog)
    if not pids:
        return MetricRecord.from_ranks({}, ks, short)
    scores = score_fn(pids, cands)
    ranks = {pid: rank_of(c, s, c[0]) for pid, c, s in zip(pids, cands, scores)}
    return MetricRecord.from_ranks(ranks, ks, short)


def popularity_baseline(train: Dataset) -> ScoreFn:
    """Score every examination by how often it occurs in training sequences."""
    if not train.patients:
        raise ValueError("empty training set")
    vocab = train.vocab
    counts = Counter(e for p in train.patients for e in p.sequence if vocab.is_exam(e))

    def score_fn(pids, cands):
        return [np.array([counts.get(c, 0) for c in cl], dtype=np.float64) for cl in cands]

    return score_fn
