"""Patient records, the patient-entity heterogeneous graph and dataset plumbing.

Entity ids are global and contiguous in the order diseases, symptoms,
examinations, age buckets, gender.  Graph columns use the same ids, so the
column of entity ``e`` is simply ``e``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from examrec.errors import ConfigError, ParseError, SchemaError

logger = logging.getLogger(__name__)

CATEGORIES = ("D", "P", "C", "B", "G")
RELATIONS = (
    "patient-disease",
    "patient-symptom",
    "patient-examination",
    "patient-age",
    "patient-gender",
)
GENDERS = ("female", "male")
N_AGE_BUCKETS = 10
FORMAT_TAG = "#meexam-v1"


@dataclass(frozen=True)
class EntityVocab:
    n_diseases: int
    n_symptoms: int
    n_exams: int

    def __post_init__(self):
        for name in ("n_diseases", "n_symptoms", "n_exams"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.n_diseases, self.n_symptoms, self.n_exams, N_AGE_BUCKETS, len(GENDERS))

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.sizes)]))

    @property
    def size(self) -> int:
        return self.offsets[-1]

    def id_range(self, category: str) -> range:
        c = CATEGORIES.index(category)
        return range(self.offsets[c], self.offsets[c + 1])

    @property
    def exam_ids(self) -> np.ndarray:
        r = self.id_range("C")
        return np.arange(r.start, r.stop)

    def category_index(self, entity_id: int) -> int:
        if not 0 <= entity_id < self.size:
            raise SchemaError(f"entity id {entity_id} outside vocabulary of size {self.size}")
        return int(np.searchsorted(self.offsets, entity_id, side="right")) - 1

    def category(self, entity_id: int) -> str:
        return CATEGORIES[self.category_index(entity_id)]

    @cached_property
    def category_array(self) -> np.ndarray:
        """Category index of every entity id."""
        return np.repeat(np.arange(len(CATEGORIES)), self.sizes)

    def global_id(self, category: str, local: int) -> int:
        r = self.id_range(category)
        if not 0 <= local < len(r):
            raise SchemaError(f"{category}:{local} outside range of {len(r)} entities")
        return r.start + local

    def local_id(self, entity_id: int) -> tuple[str, int]:
        c = self.category_index(entity_id)
        return CATEGORIES[c], entity_id - self.offsets[c]

    def is_exam(self, entity_id: int) -> bool:
        r = self.id_range("C")
        return r.start <= entity_id < r.stop

    def age_node(self, age: int) -> int:
        return self.offsets[3] + min(age // 10, N_AGE_BUCKETS - 1)

    def gender_node(self, gender: str) -> int:
        return self.offsets[4] + GENDERS.index(gender)

    def name(self, entity_id: int) -> str:
        cat, local = self.local_id(entity_id)
        if cat == "B":
            return f"age_{10 * local}-{10 * local + 9}"
        if cat == "G":
            return GENDERS[local]
        prefix = {"D": "disease", "P": "symptom", "C": "exam"}[cat]
        return f"{prefix}_{local:04d}"


@dataclass(frozen=True)
class PatientRecord:
    patient_id: int
    age: int
    gender: str
    sequence: tuple[int, ...]

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise SchemaError(f"patient {self.patient_id}: unknown gender {self.gender!r}")
        if self.age < 0:
            raise SchemaError(f"patient {self.patient_id}: negative age")
        if not self.sequence:
            raise SchemaError(f"patient {self.patient_id}: empty sequence")


@dataclass(frozen=True)
class Dataset:
    vocab: EntityVocab
    patients: tuple[PatientRecord, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate patient ids")
        limit = self.vocab.offsets[3]
        for p in self.patients:
            for e in p.sequence:
                if not 0 <= e < limit:
                    raise SchemaError(f"patient {p.patient_id}: entity {e} is not a D/P/C id")

    @cached_property
    def by_id(self) -> dict[int, PatientRecord]:
        return {p.patient_id: p for p in self.patients}

    def __len__(self):
        return len(self.patients)


@dataclass(frozen=True)
class HeteroGraph:
    """Binary patient x entity interaction matrix with typed columns."""

    adjacency: np.ndarray
    patient_ids: tuple[int, ...]
    vocab: EntityVocab

    @property
    def columns(self) -> np.ndarray:
        return np.arange(self.vocab.size)

    def relation_of(self, column: int) -> str:
        return RELATIONS[self.vocab.category_index(int(column))]

    @cached_property
    def row_of(self) -> dict[int, int]:
        return {pid: r for r, pid in enumerate(self.patient_ids)}

    @property
    def demographic_mask(self) -> np.ndarray:
        return self.vocab.category_array >= 3


@dataclass(frozen=True)
class Split:
    train: Dataset
    test: tuple[tuple[int, int], ...]
    n_dropped: int = 0
    n_no_exam: int = 0

    @cached_property
    def targets(self) -> dict[int, int]:
        return dict(self.test)


# --------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SyntheticConfig:
    n_patients: int = 200
    n_diseases: int = 30
    n_symptoms: int = 20
    n_exams: int = 20
    n_rules: int = 10
    seq_len_range: tuple[int, int] = (8, 16)
    seed: int = 0
    rule_follow_prob: float = 0.9
    exams_per_rule: int = 4
    conditions_per_rule: int = 2
    noise_prob: float = 0.3
    prior_exam_max: int = 2

    def validate(self):
        for name in ("n_patients", "n_diseases", "n_symptoms", "n_exams", "n_rules",
                     "exams_per_rule", "conditions_per_rule"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        lo, hi = self.seq_len_range
        if lo < 3 or hi < lo:
            raise ConfigError("seq_len_range", f"need 3 <= low <= high, got {self.seq_len_range}")
        if self.n_exams < 2:
            raise ConfigError("n_exams", "ranking needs at least 2 examinations")
        if self.exams_per_rule > self.n_exams:
            raise ConfigError("exams_per_rule", "larger than the examination catalog")
        if self.conditions_per_rule > min(self.n_diseases, self.n_symptoms):
            raise ConfigError("conditions_per_rule", "larger than the disease or symptom catalog")
        if self.prior_exam_max < 0:
            raise ConfigError("prior_exam_max", "must be >= 0")
        for name in ("rule_follow_prob", "noise_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(name, "must lie in [0, 1]")

    def hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class ConditionRule:
    """Latent rule: (diseases, symptoms, age band) -> preferred examinations."""

    diseases: tuple[int, ...]
    symptoms: tuple[int, ...]
    age_band: tuple[int, int]  # inclusive decade range
    exams: tuple[int, ...]


def make_rules(config: SyntheticConfig, vocab: EntityVocab, rng: np.random.Generator) -> list[ConditionRule]:
    # cyclic assignment over a permutation keeps exam popularity balanced
    def assign(ids: np.ndarray, per_rule: int) -> list[tuple[int, ...]]:
        perm = rng.permutation(ids)
        return [tuple(int(perm[(r * per_rule + j) % len(perm)]) for j in range(per_rule))
                for r in range(config.n_rules)]

    diseases = assign(np.array(vocab.id_range("D")), config.conditions_per_rule)
    symptoms = assign(np.array(vocab.id_range("P")), config.conditions_per_rule)
    exams = assign(vocab.exam_ids, config.exams_per_rule)
    rules = []
    for r in range(config.n_rules):
        lo = int(rng.integers(1, 8))
        hi = min(lo + int(rng.integers(1, 3)), N_AGE_BUCKETS - 1)
        rules.append(ConditionRule(diseases[r], symptoms[r], (lo, hi), exams[r]))
    return rules


def _pick_exam(rule: ConditionRule, config: SyntheticConfig, vocab: EntityVocab, rng) -> int:
    if rng.random() < config.rule_follow_prob:
        return int(rng.choice(rule.exams))
    return int(rng.choice(vocab.exam_ids))


def _episode(rule, config, vocab, rng, active: bool) -> list[int]:
    conds = list(rule.diseases + rule.symptoms)
    n_cond = int(rng.integers(1, len(conds) + 1))
    tokens = [int(c) for c in rng.choice(conds, size=n_cond, replace=False)]
    if rng.random() < config.noise_prob:
        pool = np.arange(vocab.offsets[2])
        tokens.insert(int(rng.integers(0, len(tokens) + 1)), int(rng.choice(pool)))
    n_exam = int(rng.integers(1, 3)) if active else int(rng.integers(0, config.prior_exam_max + 1))
    tokens += [_pick_exam(rule, config, vocab, rng) for _ in range(n_exam)]
    return tokens


def generate_synthetic(config: SyntheticConfig, return_latent: bool = False):
    """Sample a rule-driven EHR dataset.

    Each patient carries one active rule.  The sequence ends with an episode
    of that rule (condition tokens, then examinations); earlier episodes come
    from random rules, so the most recent conditions predict the next exam.
    Rules share examinations (each exam belongs to several rules by default),
    which keeps exams from older episodes among the ranking candidates.

    With ``return_latent`` the rules and each patient's active-rule index are
    returned alongside the dataset.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    vocab = EntityVocab(config.n_diseases, config.n_symptoms, config.n_exams)
    rules = make_rules(config, vocab, rng)
    lo, hi = config.seq_len_range

    patients, active = [], []
    for pid in range(config.n_patients):
        r = int(rng.integers(config.n_rules))
        rule = rules[r]
        age = int(rng.integers(10 * rule.age_band[0], 10 * rule.age_band[1] + 10))
        gender = GENDERS[int(rng.integers(2))]
        length = int(rng.integers(lo, hi + 1))
        seq = _episode(rule, config, vocab, rng, active=True)
        while len(seq) < length:
            prior = rules[int(rng.integers(config.n_rules))]
            seq = _episode(prior, config, vocab, rng, active=False) + seq
        seq = seq[-length:]
        patients.append(PatientRecord(pid, age, gender, tuple(seq)))
        active.append(r)

    dataset = Dataset(vocab, tuple(patients), {"seed": config.seed, "config_hash": config.hash()})
    if return_latent:
        return dataset, rules, active
    return dataset


# --------------------------------------------------------------------------
# file I/O


def save_dataset(dataset: Dataset, path) -> None:
    v = dataset.vocab
    meta = dataset.metadata
    header = [FORMAT_TAG, f"seed={meta.get('seed', 0)}", f"diseases={v.n_diseases}",
              f"symptoms={v.n_symptoms}", f"exams={v.n_exams}"]
    if "config_hash" in meta:
        header.append(f"config={meta['config_hash']}")
    lines = [" ".join(header)]
    for p in dataset.patients:
        toks = ",".join("%s:%d" % v.local_id(e) for e in p.sequence)
        lines.append(f"{p.patient_id}\t{p.age}\t{p.gender}\t{toks}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> dict:
    parts = line.split()
    if not parts or parts[0] != FORMAT_TAG:
        raise ParseError(1, f"expected header starting with {FORMAT_TAG!r}")
    out = {}
    for part in parts[1:]:
        key, sep, value = part.partition("=")
        if not sep:
            raise ParseError(1, f"bad header field {part!r}")
        out[key] = value
    if "seed" not in out:
        raise ParseError(1, "header lacks seed=")
    return out


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise ParseError(1, "empty file")
    header = _parse_header(lines[0])

    raw = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ParseError(no, f"expected 4 tab-separated fields, got {len(fields)}")
        try:
            pid, age = int(fields[0]), int(fields[1])
        except ValueError as exc:
            raise ParseError(no, str(exc)) from None
        gender = fields[2]
        if gender not in GENDERS:
            raise SchemaError(f"line {no}: unknown gender {gender!r}")
        toks = []
        for tok in fields[3].split(","):
            cat, sep, local = tok.partition(":")
            if not sep:
                raise ParseError(no, f"malformed entity token {tok!r}")
            if cat not in ("D", "P", "C"):
                raise SchemaError(f"line {no}: unknown entity category {cat!r}")
            try:
                toks.append((cat, int(local)))
            except ValueError:
                raise ParseError(no, f"malformed entity token {tok!r}") from None
        raw.append((pid, age, gender, toks))

    def count(key, cat):
        if key in header:
            return int(header[key])
        return 1 + max((l for *_, toks in raw for c, l in toks if c == cat), default=0)

    vocab = EntityVocab(count("diseases", "D"), count("symptoms", "P"), count("exams", "C"))
    patients = tuple(
        PatientRecord(pid, age, gender, tuple(vocab.global_id(c, l) for c, l in toks))
        for pid, age, gender, toks in raw
    )
    meta = {"seed": int(header["seed"])}
    if "config" in header:
        meta["config_hash"] = header["config"]
    return Dataset(vocab, patients, meta)


# --------------------------------------------------------------------------
# protocol helpers


def leave_one_out_split(dataset: Dataset) -> Split:
    """Hold out the last examination occurrence of each patient."""
    vocab = dataset.vocab
    train, test = [], []
    n_dropped = n_no_exam = 0
    for p in dataset.patients:
        exam_pos = [i for i, e in enumerate(p.sequence) if vocab.is_exam(e)]
        if not exam_pos:
            n_no_exam += 1
            train.append(p)
            continue
        i = exam_pos[-1]
        rest = p.sequence[:i] + p.sequence[i + 1:]
        if not rest:
            n_dropped += 1
            continue
        train.append(dataclasses.replace(p, sequence=rest))
        test.append((p.patient_id, p.sequence[i]))
    if n_no_exam:
        logger.warning("%d patients have no examination and are excluded from testing", n_no_exam)
    if n_dropped:
        logger.warning("%d patients dropped: nothing left to train on after holdout", n_dropped)
    return Split(Dataset(vocab, tuple(train), dict(dataset.metadata)), tuple(test), n_dropped, n_no_exam)


def build_hetero_graph(train: Dataset) -> HeteroGraph:
    vocab = train.vocab
    A = np.zeros((len(train.patients), vocab.size), dtype=np.uint8)
    for row, p in enumerate(train.patients):
        A[row, list(p.sequence)] = 1
        A[row, vocab.age_node(p.age)] = 1
        A[row, vocab.gender_node(p.gender)] = 1
    return HeteroGraph(A, tuple(p.patient_id for p in train.patients), vocab)


def sample_negatives(patient_id: int, split: Split, n: int, rng: np.random.Generator) -> list[int]:
    """Draw ``n`` distinct non-interacted examinations other than the target.

    Returns fewer than ``n`` ids when the catalog runs short; callers flag it.
    """
    vocab = split.train.vocab
    excluded = {e for e in split.train.by_id[patient_id].sequence if vocab.is_exam(e)}
    target = split.targets.get(patient_id)
    if target is not None:
        excluded.add(target)
    pool = np.array([c for c in vocab.exam_ids if c not in excluded], dtype=np.int64)
    if len(pool) <= n:
        return [int(c) for c in pool]
    return [int(c) for c in rng.choice(pool, size=n, replace=False)]


def filter_sequence(sequence: Sequence[int], keep: Iterable[int] | np.ndarray) -> tuple[int, ...]:
    keep = set(int(k) for k in keep)
    out = tuple(e for e in sequence if e in keep)
    return out if out else (sequence[-1],)


def update_sequences(train: Dataset, subgraph) -> Dataset:
    """Drop sequence tokens whose patient-entity edge is absent from ``subgraph``.

    ``subgraph`` needs ``adjacency`` and ``patient_ids`` aligned with ``train``.
    """
    rows = {pid: r for r, pid in enumerate(subgraph.patient_ids)}
    patients = []
    for p in train.patients:
        kept = np.flatnonzero(subgraph.adjacency[rows[p.patient_id]])
        patients.append(dataclasses.replace(p, sequence=filter_sequence(p.sequence, kept)))
    return Dataset(train.vocab, tuple(patients), dict(train.metadata))
