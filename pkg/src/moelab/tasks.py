"""Synthetic classification corpora standing in for multi-subject QA and 5-way sentiment.

Token layout: id 0 is the query marker, ids ``1 .. n_labels`` are the answer
tokens, and each subject owns a contiguous block of content ids starting at
``CONTENT_BASE``. An example is ``seq_len`` content tokens followed by the
query marker; the model must predict the answer token after the marker.

``subject_mix`` is a fact-recall task: a subject's block holds entity,
relation and filler tokens, every example ends with one entity and one
relation, and the answer is that subject's table entry for the pair. The
table is random, so it has to be memorized rather than read off linearly.

``sentiment5`` gives every content token a score in 0..4; the answer is the
mean score rounded half up.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import SequenceDataset

QUERY = 0
CONTENT_BASE = 8
TASK_FORMAT = "moelab-task/1"


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "subject_mix"  # subject_mix | sentiment5
    n_subjects: int = 8
    block_size: int = 48
    seq_len: int = 4
    n_labels: int = 5
    n_entities: int = 12
    n_relations: int = 4
    subject_zipf: float = 1.0  # subject frequency ~ 1 / (rank + 1) ** subject_zipf
    balance_labels: bool = False
    n_train: int = 4000
    n_val: int = 1000
    seed: int = 0
    n_vocab: int = 512

    def __post_init__(self):
        if self.kind not in ("subject_mix", "sentiment5"):
            raise TaskError(f"unknown task kind {self.kind!r}")
        if self.kind == "sentiment5" and self.n_labels != 5:
            raise TaskError("sentiment5 has exactly 5 labels")
        if min(self.n_subjects, self.block_size, self.seq_len, self.n_labels) < 1:
            raise TaskError("task extents must be >= 1")
        if self.n_labels >= CONTENT_BASE:
            raise TaskError(f"at most {CONTENT_BASE - 1} labels fit before the content blocks")
        if self.kind == "subject_mix":
            if self.n_entities < 1 or self.n_relations < 1 or self.n_filler < 1:
                raise TaskError("block_size must exceed n_entities + n_relations")
            if self.seq_len < 3:
                raise TaskError("subject_mix needs seq_len >= 3")
        if self.vocab_needed > self.n_vocab:
            raise TaskError(
                f"{self.n_subjects} subjects x {self.block_size} tokens need {self.vocab_needed} ids, vocab is {self.n_vocab}"
            )

    @property
    def vocab_needed(self) -> int:
        return CONTENT_BASE + self.n_subjects * self.block_size

    @property
    def n_filler(self) -> int:
        return self.block_size - self.n_entities - self.n_relations

    @property
    def answer_pos(self) -> int:
        return self.seq_len

    @property
    def example_len(self) -> int:
        return self.seq_len + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticTask:
        return cls(**d)


@dataclass
class LabelRule:
    """Deterministic token -> answer rule shared by generation and checking.

    ``table`` is (n_subjects, n_entities, n_relations) answer indices for
    subject_mix and (n_subjects, block_size) token scores for sentiment5.
    """

    kind: str
    n_labels: int
    block_size: int
    n_entities: int
    n_relations: int
    table: np.ndarray

    def block_start(self, subject: int) -> int:
        return CONTENT_BASE + subject * self.block_size

    def label(self, subject: int, tokens: np.ndarray) -> int:
        """Answer index (0-based) for a content sequence."""
        rel = np.asarray(tokens) - self.block_start(subject)
        if rel.min() < 0 or rel.max() >= self.block_size:
            raise TaskError("content tokens outside the subject's block")
        if self.kind == "sentiment5":
            return int(math.floor(self.table[subject, rel].mean() + 0.5))
        e = int(rel[-2])
        r = int(rel[-1]) - self.n_entities
        if not (0 <= e < self.n_entities and 0 <= r < self.n_relations):
            raise TaskError("sequence does not end with an (entity, relation) pair")
        return int(self.table[subject, e, r])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_labels": self.n_labels,
            "block_size": self.block_size,
            "n_entities": self.n_entities,
            "n_relations": self.n_relations,
            "table": self.table.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> LabelRule:
        return cls(d["kind"], d["n_labels"], d["block_size"], d["n_entities"], d["n_relations"], np.array(d["table"]))


def make_rule(task: SyntheticTask, rng: np.random.Generator) -> LabelRule:
    if task.kind == "sentiment5":
        table = rng.integers(0, task.n_labels, size=(task.n_subjects, task.block_size))
    else:
        table = rng.integers(0, task.n_labels, size=(task.n_subjects, task.n_entities, task.n_relations))
    return LabelRule(task.kind, task.n_labels, task.block_size, task.n_entities, task.n_relations, table)


def _subject_weights(task: SyntheticTask) -> np.ndarray:
    w = 1.0 / np.arange(1, task.n_subjects + 1, dtype=np.float64) ** task.subject_zipf
    return w / w.sum()


def _draw(task: SyntheticTask, rule: LabelRule, rng, subject: int, want: int | None, max_tries: int = 10_000):
    start = rule.block_start(subject)
    if task.kind == "subject_mix":
        filler_start = start + task.n_entities + task.n_relations
        if want is None:
            pairs = [(rng.integers(task.n_entities), rng.integers(task.n_relations))]
        else:
            pairs = np.argwhere(rule.table[subject] == want)
            if pairs.size == 0:
                raise TaskError(f"subject {subject} has no fact with answer {want}")
            pairs = [pairs[rng.integers(len(pairs))]]
        e, r = (int(v) for v in pairs[0])
        filler = filler_start + rng.integers(0, task.n_filler, size=task.seq_len - 2)
        toks = np.concatenate([filler, [start + e, start + task.n_entities + r]])
        return toks, rule.label(subject, toks)
    for _ in range(max_tries):
        if want is not None:
            # bias token scores toward the wanted label so extreme labels stay reachable
            score = np.abs(rule.table[subject] - want)
            p = np.exp(-1.5 * score)
            toks = start + rng.choice(task.block_size, size=task.seq_len, p=p / p.sum())
        else:
            toks = start + rng.integers(0, task.block_size, size=task.seq_len)
        lab = rule.label(subject, toks)
        if want is None or lab == want:
            return toks, lab
    raise TaskError(f"could not draw label {want} for subject {subject}")


def _build(task: SyntheticTask, rule: LabelRule, rng, n: int, seen: set) -> list[dict]:
    weights = _subject_weights(task)
    rows = []
    while len(rows) < n:
        subject = int(rng.choice(task.n_subjects, p=weights))
        want = (len(rows) % task.n_labels) if task.balance_labels else None
        toks, lab = _draw(task, rule, rng, subject, want)
        key = (subject, tuple(int(t) for t in toks))
        if key in seen:
            continue
        seen.add(key)
        rows.append({"subject": subject, "label": lab, "tokens": [int(t) for t in toks]})
    return rows


def generate_examples(task: SyntheticTask) -> tuple[LabelRule, list[dict], list[dict]]:
    rng = np.random.default_rng(task.seed)
    rule = make_rule(task, rng)
    seen: set = set()
    train = _build(task, rule, rng, task.n_train, seen)
    val = _build(task, rule, rng, task.n_val, seen)
    return rule, train, val


def to_dataset(rows: list[dict], task: SyntheticTask) -> SequenceDataset:
    n = len(rows)
    t = task.example_len
    tokens = np.full((n, t), QUERY, dtype=np.int64)
    targets = np.full((n, t), -1, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    subjects = np.empty(n, dtype=np.int64)
    for i, r in enumerate(rows):
        tokens[i, : task.seq_len] = r["tokens"]
        labels[i] = 1 + r["label"]
        targets[i, task.answer_pos] = labels[i]
        subjects[i] = r["subject"]
    return SequenceDataset(tokens, targets, labels, subjects, task.answer_pos)


def generate_task(task: SyntheticTask, out_dir) -> dict[str, Path]:
    """Write ``task.json``, ``train.jsonl`` and ``val.jsonl`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rule, train, val = generate_examples(task)
    meta = {"format": TASK_FORMAT, "task": task.to_dict(), "rule": rule.to_dict()}
    paths = {"task": out / "task.json", "train": out / "train.jsonl", "val": out / "val.jsonl"}
    paths["task"].write_text(json.dumps(meta, sort_keys=True) + "\n")
    for split, rows in (("train", train), ("val", val)):
        paths[split].write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return paths


def load_task(task_dir) -> tuple[SyntheticTask, LabelRule, dict[str, SequenceDataset]]:
    d = Path(task_dir)
    meta = json.loads((d / "task.json").read_text())
    if meta.get("format") != TASK_FORMAT:
        raise TaskError(f"{d}: not a moelab task directory")
    task = SyntheticTask.from_dict(meta["task"])
    rule = LabelRule.from_dict(meta["rule"])
    splits = {}
    for split in ("train", "val"):
        rows = [json.loads(line) for line in (d / f"{split}.jsonl").read_text().splitlines() if line]
        splits[split] = to_dataset(rows, task)
    return task, rule, splits


def datasets(task: SyntheticTask) -> tuple[LabelRule, SequenceDataset, SequenceDataset]:
    """In-memory generation, identical to what ``generate_task`` writes."""
    rule, train, val = generate_examples(task)
    return rule, to_dataset(train, task), to_dataset(val, task)
