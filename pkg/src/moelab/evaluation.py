"""Greedy answer-token accuracy and routing diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SequenceDataset
from .model import ExpertMask, MoEModel
from .tensor import no_grad


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    total: int
    mean_gate_entropy: float
    selection_hist: np.ndarray  # (n_layer, n_experts) selections over all tokens
    per_subject: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "mean_gate_entropy": self.mean_gate_entropy,
            "selection_hist": self.selection_hist.tolist(),
            "per_subject": {str(k): v for k, v in sorted(self.per_subject.items())},
        }


def predict(model: MoEModel, data: SequenceDataset, mask: ExpertMask | None, k, batch_size: int = 256):
    """Greedy answer predictions plus per-batch gate entropies and selection counts."""
    cfg = model.config
    preds = np.empty(len(data), dtype=np.int64)
    hist = np.zeros((cfg.n_layer, cfg.n_experts), dtype=np.int64)
    ent_sum, ent_n = 0.0, 0
    with no_grad():
        for start in range(0, len(data), batch_size):
            stop = min(start + batch_size, len(data))
            out = model.forward(data.tokens[start:stop], mask, k)
            preds[start:stop] = np.argmax(out.logits.data[:, data.answer_pos, :], axis=-1)
            for rec in out.records:
                p = rec.gate_probs.astype(np.float64)
                logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
                ent_sum += float(-(p * logp).sum())
                ent_n += p.shape[0]
                hist[rec.layer] += np.bincount(rec.selected.ravel(), minlength=cfg.n_experts)
    return preds, ent_sum / max(ent_n, 1), hist


def evaluate(model: MoEModel, mask: ExpertMask | None, data: SequenceDataset, k=None) -> EvalResult:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    cfg = model.config
    if mask is None:
        mask = ExpertMask.full(cfg.n_layer, cfg.n_experts)
    ks = k if k is not None else cfg.n_topk
    mask.check_feasible(max(np.atleast_1d(ks)))
    preds, ent, hist = predict(model, data, mask, ks)
    hit = preds == data.labels
    per_subject = {int(s): float(hit[data.subjects == s].mean()) for s in np.unique(data.subjects)}
    return EvalResult(float(hit.mean()), int(hit.sum()), len(data), ent, hist, per_subject)


def evaluate_subject_masks(model: MoEModel, masks: dict, data: SequenceDataset, k=None) -> EvalResult:
    """Each subject's examples evaluated under that subject's own mask."""
    cfg = model.config
    parts = data.by_subject()
    correct = total = 0
    ent_weighted = 0.0
    hist = np.zeros((cfg.n_layer, cfg.n_experts), dtype=np.int64)
    per_subject = {}
    for s, sub in parts.items():
        key = str(s)
        if key not in masks:
            raise KeyError(f"no mask for subject {key}")
        r = evaluate(model, masks[key], sub, k)
        correct += r.correct
        total += r.total
        ent_weighted += r.mean_gate_entropy * r.total
        hist += r.selection_hist
        per_subject[s] = r.accuracy
    return EvalResult(correct / total, correct, total, ent_weighted / total, hist, per_subject)
