"""Top-k adaptation: AdamW training under a k schedule with a gate-entropy penalty."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _accel
from .data import SequenceDataset
from .model import ExpertMask, MoEModel, RoutingRecord, is_router_param
from .tensor import Tensor, ops


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, metrics: dict):
        super().__init__(f"loss became non-finite at step {step}: {metrics}")
        self.step = step
        self.metrics = metrics


@dataclass(frozen=True)
class TopKSchedule:
    mode: str = "static"  # static | anneal
    k_start: int = 2
    k_end: int = 2
    anneal_fraction: float = 0.5
    total_steps: int = 1

    def __post_init__(self):
        if self.mode not in ("static", "anneal"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.k_end > self.k_start or self.k_end < 1:
            raise ValueError("need 1 <= k_end <= k_start")
        if not 0.0 <= self.anneal_fraction <= 1.0:
            raise ValueError("anneal_fraction must be in [0, 1]")

    @classmethod
    def static(cls, k: int, total_steps: int = 1) -> TopKSchedule:
        return cls("static", k, k, 0.0, total_steps)

    @property
    def k_max(self) -> int:
        return self.k_start

    def to_dict(self) -> dict:
        return asdict(self)


def schedule_k(schedule: TopKSchedule, step: int) -> int:
    """Active expert count at ``step``: linear K -> k over the anneal span, rounded half up."""
    if schedule.mode == "static":
        return schedule.k_start
    span = schedule.anneal_fraction * schedule.total_steps
    if step >= span:
        return schedule.k_end
    value = schedule.k_start + (schedule.k_end - schedule.k_start) * (step / span)
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.0  # entropy weight
    aux_balance: float = 0.0  # optional load-balancing weight (off unless asked for)

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("entropy weight must be finite and >= 0")
        if not (math.isfinite(self.aux_balance) and self.aux_balance >= 0):
            raise ValueError("aux_balance must be finite and >= 0")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.01
    trainable_scope: str = "all"  # all | router_only
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.trainable_scope not in ("all", "router_only"):
            raise ValueError(f"unknown trainable_scope {self.trainable_scope!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def gate_entropy(gate_prob_rows: Sequence[Tensor]) -> Tensor:
    """Mean entropy over every (token, MoE layer) pair."""
    if not gate_prob_rows:
        raise ValueError("no gate rows")
    n = gate_prob_rows[0].shape[0]
    if any(g.ndim != 2 or g.shape[0] != n for g in gate_prob_rows):
        raise ValueError("gate rows must be (N, n_experts) with equal N across layers")
    per_layer = [ops.mean(ops.entropy(g)) for g in gate_prob_rows]
    total = per_layer[0]
    for h in per_layer[1:]:
        total = total + h
    return total * (1.0 / len(per_layer))


def total_loss(logits: Tensor, targets, gate_prob_rows: Sequence[Tensor], cfg: LossConfig):
    """Cross-entropy plus ``cfg.lam`` times the mean gate entropy.

    Returns ``(loss, ce, mean_entropy)``; ``logits`` may be (..., V) with
    ``targets`` of the matching leading shape.
    """
    v = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    ce = ops.cross_entropy(ops.reshape(logits, (-1, v)), targets.reshape(-1))
    h = gate_entropy(gate_prob_rows)
    loss = ce + h * cfg.lam if cfg.lam else ce
    return loss, ce, h


def balance_loss(records: Sequence[RoutingRecord]) -> Tensor:
    """Switch-style n_experts * sum_j (fraction routed to j) * (mean gate prob of j), layer-averaged."""
    terms = []
    for rec in records:
        n, e = rec.gate_probs.shape
        frac = np.bincount(rec.selected.ravel(), minlength=e) / float(rec.selected.size)
        mean_p = ops.mean(rec.gate_tensor, axis=0)
        terms.append(ops.sum(mean_p * frac.astype(rec.gate_probs.dtype)) * float(e))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out * (1.0 / len(terms))


class AdamW:
    """Adam with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            wd = self.weight_decay if p.data.ndim >= 2 else 0.0
            _accel.adamw_update(p.data, g, self.m[name], self.v[name], self.lr, self.b1, self.b2, c1, c2, self.eps, wd)


@dataclass
class TrainResult:
    model: MoEModel
    metrics: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.metrics[-1]


def train(
    model: MoEModel,
    mask: ExpertMask | None,
    data: SequenceDataset,
    schedule: TopKSchedule,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    log_path=None,
) -> TrainResult:
    """Train ``model`` in place and return it with one metrics dict per step."""
    cfg = model.config
    if mask is None:
        mask = ExpertMask.full(cfg.n_layer, cfg.n_experts)
    mask.check_feasible(schedule.k_max)
    if len(data) == 0:
        raise ValueError("empty training set")
    if train_cfg.trainable_scope == "router_only":
        trainable = {n: p for n, p in model.params.items() if is_router_param(n)}
    else:
        trainable = dict(model.params)
    opt = AdamW(trainable, train_cfg.lr, train_cfg.weight_decay, train_cfg.betas, train_cfg.eps)
    rng = np.random.default_rng(train_cfg.seed)
    # frozen params stay out of the graph entirely
    for name, p in model.params.items():
        p.requires_grad = name in trainable
    sched = TopKSchedule(schedule.mode, schedule.k_start, schedule.k_end, schedule.anneal_fraction, train_cfg.steps)
    metrics = []
    log = open(log_path, "w") if log_path is not None else None
    try:
        bs = min(train_cfg.batch_size, len(data))
        for step in range(train_cfg.steps):
            idx = np.sort(rng.choice(len(data), size=bs, replace=False))
            k = schedule_k(sched, step)
            out = model.forward(data.tokens[idx], mask, k)
            gates = [r.gate_tensor for r in out.records]
            loss, ce, h = total_loss(out.logits, data.targets[idx], gates, loss_cfg)
            if loss_cfg.aux_balance:
                loss = loss + balance_loss(out.records) * loss_cfg.aux_balance
            row = {
                "step": step,
                "k": k,
                "loss": float(loss.data),
                "ce": float(ce.data),
                "entropy_term": float(loss_cfg.lam * h.data),
                "mean_gate_entropy": float(h.data),
            }
            if not all(math.isfinite(row[key]) for key in ("loss", "ce", "mean_gate_entropy")):
                raise TrainingDiverged(step, row)
            model.zero_grad()
            loss.backward()
            opt.step()
            metrics.append(row)
            if log is not None:
                log.write(json.dumps(row, sort_keys=True) + "\n")
    finally:
        if log is not None:
            log.close()
        for p in model.params.values():
            p.requires_grad = True
    return TrainResult(model, metrics)


def write_metrics(metrics: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in metrics))
    return path
