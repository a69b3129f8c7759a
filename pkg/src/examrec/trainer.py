"""Two-stage training: diffusion denoising of the graph, then the recommender.

Each outer round trains the denoiser (scaled by the task-adaptive gate),
rebuilds the subgraph, filters the sequences through it and trains the
encoders.  The recommender's epoch losses drive the gate for the next round.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from examrec.config import RunConfig
from examrec.diffusion import (
    DenoisedSubgraph,
    DenoiserNet,
    GateState,
    elbo_loss,
    gate,
    make_schedule,
    rebuild_subgraph,
    reverse_denoise,
    with_demographics,
)
from examrec.ehr_graph import (
    Dataset,
    EntityVocab,
    HeteroGraph,
    Split,
    build_hetero_graph,
    filter_sequence,
    leave_one_out_split,
)
from examrec.evaluation import MetricRecord, evaluate
from examrec.fusion import rec_loss
from examrec.kansformer import pad_sequences
from examrec.model import ExamRecommender

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message, stage=None, round_=None, epoch=None):
        where = ", ".join(f"{k}={v}" for k, v in (("round", round_), ("stage", stage), ("epoch", epoch))
                          if v is not None)
        super().__init__(f"{message} ({where})" if where else message)


@dataclass
class LossLog:
    rows: list = field(default_factory=list)  # (round, stage, epoch, loss, gate)

    def add(self, round_, stage, epoch, loss, gate_value):
        self.rows.append((round_, stage, epoch, float(loss), float(gate_value)))

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("round,stage,epoch,loss,gate\n")
            for r, s, e, loss, g in self.rows:
                fh.write(f"{r},{s},{e},{loss:.8g},{g:g}\n")


# --------------------------------------------------------------------------
# stage 1


def schedule_for(config: RunConfig):
    return make_schedule(config.noise_scale, config.noise_min, config.noise_max, config.diff_steps)


def _check_finite(loss, stage, round_, epoch):
    if not math.isfinite(loss.item()):
        raise TrainingError(f"non-finite loss {float(loss)}", stage, round_, epoch)


def train_stage1(graph: HeteroGraph, config: RunConfig, gate_state: GateState,
                 denoiser: DenoiserNet | None = None, optimizer=None, generator: torch.Generator | None = None,
                 log: LossLog | None = None, round_: int = 1):
    """Fit the denoiser on the patient rows, then rebuild the top-k subgraph.

    The ELBO is scaled by ``gate_state.last``, the multiplier produced by the
    most recent recommendation loss.  Returns (denoiser, subgraph, epoch losses).
    """
    if graph.adjacency.shape[0] == 0:
        raise TrainingError("empty graph", 1, round_)
    schedule = schedule_for(config)
    gen = generator or torch.Generator().manual_seed(config.seed)
    if denoiser is None:
        denoiser = DenoiserNet(graph.adjacency.shape[1], config.step_dim)
    if optimizer is None:
        optimizer = torch.optim.Adam(denoiser.parameters(), lr=config.denoiser_lr)
    X = torch.as_tensor(graph.adjacency, dtype=torch.float32)
    multiplier = gate_state.last
    losses = []
    denoiser.train()
    for epoch in range(1, config.n_denoiser_epochs + 1):
        perm = torch.randperm(X.shape[0], generator=gen)
        total = 0.0
        for lo in range(0, X.shape[0], config.batch_size):
            batch = X[perm[lo:lo + config.batch_size]]
            loss = elbo_loss(batch, denoiser, schedule, gen)
            _check_finite(loss, 1, round_, epoch)
            optimizer.zero_grad()
            (multiplier * loss).backward()
            optimizer.step()
            total += loss.item() * batch.shape[0]
        losses.append(total / X.shape[0])
        if log is not None:
            log.add(round_, 1, epoch, losses[-1], multiplier)
    denoiser.eval()
    scores = reverse_denoise(X, config.n_inference_steps, schedule, denoiser)
    subgraph = with_demographics(rebuild_subgraph(scores.numpy(), config.k, graph), graph)
    return denoiser, subgraph, losses


# --------------------------------------------------------------------------
# stage 2


@dataclass
class Instances:
    rows: torch.Tensor  # patient row in the graph
    seq_ids: torch.Tensor
    mask: torch.Tensor
    candidates: torch.Tensor  # target first, then negatives
    labels: torch.Tensor

    def __len__(self):
        return self.rows.shape[0]

    def take(self, idx):
        return Instances(self.rows[idx], self.seq_ids[idx], self.mask[idx], self.candidates[idx],
                         self.labels[idx])


def make_instances(train: Dataset, graph: HeteroGraph, subgraph_adj: np.ndarray, config: RunConfig,
                   rng: np.random.Generator) -> Instances:
    """Next-examination instances: every exam after the first token, predicted
    from its prefix filtered through the subgraph."""
    vocab = train.vocab
    rows, seqs, targets, owners = [], [], [], []
    for p in train.patients:
        r = graph.row_of[p.patient_id]
        kept = np.flatnonzero(subgraph_adj[r])
        for j in range(1, len(p.sequence)):
            if vocab.is_exam(p.sequence[j]):
                rows.append(r)
                seqs.append(filter_sequence(p.sequence[:j], kept))
                targets.append(p.sequence[j])
                owners.append(p)
    if not rows:
        raise TrainingError("no training instances: sequences lack examinations after their first token", 2)
    # negatives: exams the patient never had, as in evaluation
    exams = vocab.exam_ids
    negs = np.empty((len(targets), config.train_negatives), dtype=np.int64)
    for i, (p, t) in enumerate(zip(owners, targets)):
        pool = exams[~np.isin(exams, p.sequence)]
        if len(pool) == 0:
            pool = exams[exams != t]
        negs[i] = rng.choice(pool, size=config.train_negatives)
    cands = np.concatenate([np.asarray(targets)[:, None], negs], axis=1)
    labels = np.zeros(cands.shape, dtype=np.float32)
    labels[:, 0] = 1.0
    ids, mask = pad_sequences(seqs, config.max_len)
    return Instances(torch.as_tensor(rows), ids, mask, torch.as_tensor(cands), torch.as_tensor(labels))


def train_stage2(subgraph: DenoisedSubgraph, train: Dataset, config: RunConfig, graph: HeteroGraph,
                 model: ExamRecommender | None = None, optimizer=None,
                 rng: np.random.Generator | None = None, generator: torch.Generator | None = None,
                 log: LossLog | None = None, round_: int = 1):
    """Train the encoders and fusion on the subgraph; returns (model, epoch losses)."""
    rng = rng or np.random.default_rng(config.seed)
    gen = generator or torch.Generator().manual_seed(config.seed)
    vocab = train.vocab
    if model is None:
        model = ExamRecommender(vocab.size, len(graph.patient_ids), config)
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    model.set_graph(subgraph.adjacency, vocab.category_array)
    data = make_instances(train, graph, subgraph.adjacency, config, rng)
    params = list(model.parameters())
    losses = []
    model.train()
    for epoch in range(1, config.epochs + 1):
        perm = torch.randperm(len(data), generator=gen)
        total = 0.0
        for lo in range(0, len(data), config.batch_size):
            b = data.take(perm[lo:lo + config.batch_size])
            logits = model(b.rows, b.seq_ids, b.mask, b.candidates)
            loss = rec_loss(logits, b.labels, config.reg_lambda, params)
            _check_finite(loss, 2, round_, epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(b)
        losses.append(total / len(data))
    return model, losses


# --------------------------------------------------------------------------
# scoring and checkpoints


class ModelScorer:
    """Scores candidate lists for patients of a split with a trained model.

    Input sequences drop tokens whose edge the denoiser removed; tokens the
    training graph never contained are kept.
    """

    def __init__(self, model: ExamRecommender, graph_adj: np.ndarray, subgraph_adj: np.ndarray,
                 patient_ids, inputs: Dataset):
        self.model = model
        self.row_of = {pid: r for r, pid in enumerate(patient_ids)}
        self.removed = (graph_adj > 0) & (subgraph_adj == 0)
        self.inputs = inputs

    def sequence(self, pid: int) -> tuple[int, ...]:
        seq = self.inputs.by_id[pid].sequence
        gone = self.removed[self.row_of[pid]]
        keep = [e for e in range(len(gone)) if not gone[e]]
        return filter_sequence(seq, keep)

    def __call__(self, pids, cands):
        rows = [self.row_of[p] for p in pids]
        return self.model.score_lists(rows, [self.sequence(p) for p in pids], list(cands))


@dataclass
class Checkpoint:
    config: RunConfig
    vocab: EntityVocab
    patient_ids: tuple[int, ...]
    graph_adj: np.ndarray
    subgraph_adj: np.ndarray
    state: dict
    round: int = 0
    metrics: dict = field(default_factory=dict)

    def build_model(self) -> ExamRecommender:
        model = ExamRecommender(self.vocab.size, len(self.patient_ids), self.config)
        model.load_state_dict({k: torch.as_tensor(v) for k, v in self.state.items()})
        model.set_graph(self.subgraph_adj, self.vocab.category_array)
        model.eval()
        return model

    def scorer(self, inputs: Dataset) -> ModelScorer:
        return ModelScorer(self.build_model(), self.graph_adj, self.subgraph_adj, self.patient_ids, inputs)

    def save(self, path) -> None:
        """Single ``.npz`` archive: ``param/<name>`` blocks plus a JSON index."""
        meta = {
            "config": self.config.to_text(),
            "config_hash": self.config.hash(),
            "vocab": [self.vocab.n_diseases, self.vocab.n_symptoms, self.vocab.n_exams],
            "patient_ids": list(self.patient_ids),
            "round": self.round,
            "metrics": self.metrics,
            "params": sorted(self.state),
        }
        arrays = {f"param/{k}": v for k, v in self.state.items()}
        arrays["graph_adj"] = self.graph_adj
        arrays["subgraph_adj"] = self.subgraph_adj
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            state = {k: z[f"param/{k}"] for k in meta["params"]}
            graph_adj, subgraph_adj = z["graph_adj"], z["subgraph_adj"]
        config = RunConfig.from_text(meta["config"])
        if config.hash() != meta["config_hash"]:
            raise ValueError(f"{path}: config hash mismatch")
        return cls(config, EntityVocab(*meta["vocab"]), tuple(meta["patient_ids"]), graph_adj, subgraph_adj,
                   state, meta["round"], meta["metrics"])


def _state_arrays(model) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


# --------------------------------------------------------------------------
# full procedure


def validation_split(train: Dataset) -> Split:
    """Hold out the last training examination for model selection.

    Patients with nothing left after the holdout stay in the fit set unchanged.
    """
    inner = leave_one_out_split(train)
    kept = {p.patient_id for p in inner.train.patients}
    patients = [inner.train.by_id[p.patient_id] if p.patient_id in kept else p for p in train.patients]
    fit = Dataset(train.vocab, tuple(patients), dict(train.metadata))
    return Split(fit, inner.test, inner.n_dropped, inner.n_no_exam)


@dataclass
class TrainReport:
    losses: LossLog
    validation: list  # MetricRecord per round
    test: MetricRecord | None
    best_round: int
    gates: list  # multiplier applied in each round's stage 1


def train(dataset: Dataset, config: RunConfig, split: Split | None = None):
    """Run the outer rounds and return (best checkpoint, report)."""
    config.validate()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)

    split = split or leave_one_out_split(dataset)
    val = validation_split(split.train)
    fit = val.train
    graph = build_hetero_graph(fit)
    vocab = dataset.vocab
    eps = config.gate_eps if config.task_adaptive else 1.0
    gate_state = GateState(config.gate_window, eps)
    log = LossLog()

    model = ExamRecommender(vocab.size, len(graph.patient_ids), config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    denoiser = den_opt = None

    best = None
    val_records, gates = [], []
    for r in range(1, config.rounds + 1):
        if config.use_diffusion:
            if denoiser is None or config.reset_denoiser:
                denoiser = DenoiserNet(vocab.size, config.step_dim)
                den_opt = torch.optim.Adam(denoiser.parameters(), lr=config.denoiser_lr)
            gates.append(gate_state.last)
            denoiser, subgraph, _ = train_stage1(graph, config, gate_state, denoiser, den_opt, gen, log, r)
        else:
            subgraph = DenoisedSubgraph(graph.adjacency.copy(), config.k, np.zeros((0, 0)), graph.patient_ids)
        model, losses = train_stage2(subgraph, fit, config, graph, model, optimizer, rng, gen, log, r)
        for e, loss in enumerate(losses, start=1):
            log.add(r, 2, e, loss, gate(gate_state, loss))

        ckpt = Checkpoint(config, vocab, graph.patient_ids, graph.adjacency, subgraph.adjacency,
                          _state_arrays(model), r)
        rec = evaluate(ckpt.scorer(fit), val, config.eval_negatives, config.seed)
        val_records.append(rec)
        logger.info("round %d validation: %s", r, rec.summary())
        if best is None or not config.select_by_validation or rec.hr[10] > best[1].hr[10]:
            best = (ckpt, rec)

    ckpt = best[0]
    test = evaluate(ckpt.scorer(split.train), split, config.eval_negatives, config.seed)
    ckpt.metrics = {"validation_hr10": best[1].hr[10], "test": {f"{n}@{k}": v for n, k, v in test.as_rows()}}
    return ckpt, TrainReport(log, val_records, test, ckpt.round, gates)


def evaluate_checkpoint(ckpt: Checkpoint, dataset: Dataset, n_negatives: int | None = None,
                        seed: int | None = None, full_catalog: bool = False) -> tuple[MetricRecord, Split]:
    split = leave_one_out_split(dataset)
    rec = evaluate(ckpt.scorer(split.train), split,
                   ckpt.config.eval_negatives if n_negatives is None else n_negatives,
                   ckpt.config.seed if seed is None else seed, full_catalog=full_catalog)
    return rec, split
