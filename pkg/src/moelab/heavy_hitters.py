"""Per-(layer, expert) routing statistics: hard activation counts or soft gate mass."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _accel
from .model import RoutingRecord

MODES = ("activation", "soft")
STATS_FORMAT = "moelab-stats/1"


@dataclass
class ExpertStats:
    mode: str
    counts: np.ndarray
    tokens_seen: int = 0
    k_used: int | None = None
    subject_key: str | None = None
    per_subject: dict[str, np.ndarray] = field(default_factory=dict)
    subject_tokens: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown counting mode {self.mode!r}")
        dtype = np.int64 if self.mode == "activation" else np.float64
        self.counts = np.array(self.counts, dtype=dtype)
        if self.counts.ndim != 2:
            raise ValueError("counts must be (n_layer, n_experts)")

    @classmethod
    def empty(cls, mode: str, n_layer: int, n_experts: int, subject_key: str | None = None) -> ExpertStats:
        dtype = np.int64 if mode == "activation" else np.float64
        return cls(mode, np.zeros((n_layer, n_experts), dtype=dtype), subject_key=subject_key)

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def subject(self, label: str) -> ExpertStats:
        """Stats restricted to one subject."""
        if label not in self.per_subject:
            raise KeyError(f"no statistics recorded for subject {label!r}")
        return ExpertStats(
            self.mode,
            self.per_subject[label].copy(),
            tokens_seen=self.subject_tokens[label],
            k_used=self.k_used,
            subject_key=label,
        )

    def subjects(self) -> list[str]:
        return sorted(self.per_subject)

    def content_hash(self) -> str:
        return hashlib.sha256(_dumps(self).encode()).hexdigest()


def _layer_increment(mode: str, rec: RoutingRecord, n_experts: int) -> np.ndarray:
    if mode == "activation":
        return _accel.tally(rec.selected, n_experts)
    return _accel.column_sums(rec.gate_probs)


def record(stats: ExpertStats, records: Sequence[RoutingRecord], subject: str | None = None) -> ExpertStats:
    """Add one batch of routing records (one per MoE layer) to ``stats`` in place."""
    n_layer, n_experts = stats.shape
    if len(records) != n_layer:
        raise ValueError(f"got routing records for {len(records)} layers, stats track {n_layer}")
    n_tokens = records[0].n_tokens
    for rec in records:
        if rec.gate_probs.shape != (n_tokens, n_experts):
            raise ValueError(f"layer {rec.layer}: gate_probs shape {rec.gate_probs.shape} incompatible")
    if n_tokens == 0:
        return stats
    if stats.mode == "activation":
        ks = {rec.k for rec in records}
        if len(ks) != 1 or (stats.k_used is not None and ks != {stats.k_used}):
            raise ValueError(f"activation counting needs one fixed k, saw {sorted(ks)} vs k_used={stats.k_used}")
    if stats.k_used is None:
        stats.k_used = records[0].k
    inc = np.stack([_layer_increment(stats.mode, rec, n_experts) for rec in records])
    stats.counts += inc
    stats.tokens_seen += n_tokens
    if subject is not None:
        subject = str(subject)
        if subject not in stats.per_subject:
            stats.per_subject[subject] = np.zeros_like(stats.counts)
            stats.subject_tokens[subject] = 0
        stats.per_subject[subject] += inc
        stats.subject_tokens[subject] += n_tokens
    return stats


def merge(a: ExpertStats, b: ExpertStats) -> ExpertStats:
    """Stats equivalent to having recorded both inputs' batches into one collector."""
    if a.mode != b.mode or a.shape != b.shape:
        raise ValueError("can only merge stats with the same mode and shape")
    if a.k_used is not None and b.k_used is not None and a.k_used != b.k_used and a.mode == "activation":
        raise ValueError("cannot merge activation counts gathered at different k")
    out = ExpertStats(
        a.mode,
        a.counts + b.counts,
        tokens_seen=a.tokens_seen + b.tokens_seen,
        k_used=a.k_used if a.k_used is not None else b.k_used,
        subject_key=a.subject_key if a.subject_key == b.subject_key else None,
    )
    for src in (a, b):
        for s in src.subjects():
            if s in out.per_subject:
                out.per_subject[s] = out.per_subject[s] + src.per_subject[s]
                out.subject_tokens[s] += src.subject_tokens[s]
            else:
                out.per_subject[s] = src.per_subject[s].copy()
                out.subject_tokens[s] = src.subject_tokens[s]
    return out


def merge_all(stats: Iterable[ExpertStats]) -> ExpertStats:
    items = list(stats)
    if not items:
        raise ValueError("nothing to merge")
    out = items[0]
    for s in items[1:]:
        out = merge(out, s)
    return out


def marginal_estimate(stats: ExpertStats) -> np.ndarray:
    """Per-layer probability that each expert is picked (activation) or its mean gate mass (soft)."""
    if stats.tokens_seen <= 0:
        raise ValueError("no tokens recorded")
    denom = stats.tokens_seen * (stats.k_used if stats.mode == "activation" else 1)
    return stats.counts.astype(np.float64) / float(denom)


def export_heatmap(stats: ExpertStats, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (marginals, layer rows) and ``<path>.pgm`` (8-bit grayscale)."""
    marg = marginal_estimate(stats)
    base = Path(path)
    if base.suffix in (".csv", ".pgm"):
        base = base.with_suffix("")
    csv_path = base.with_name(base.name + ".csv")
    pgm_path = base.with_name(base.name + ".pgm")
    lines = [",".join(repr(float(v)) for v in row) for row in marg]
    csv_path.write_text("\n".join(lines) + "\n")
    lo, hi = float(marg.min()), float(marg.max())
    if hi > lo:
        pixels = np.rint((marg - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(marg.shape, dtype=np.uint8)
    n_layer, n_experts = marg.shape
    header = f"P5\n{n_experts} {n_layer}\n255\n".encode("ascii")
    pgm_path.write_bytes(header + pixels.tobytes())
    return csv_path, pgm_path


def read_heatmap_csv(path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([[float(v) for v in row.split(",")] for row in rows], dtype=np.float64)


def _matrix(m: np.ndarray, mode: str) -> list:
    if mode == "activation":
        return [[int(v) for v in row] for row in m]
    return [[float(v) for v in row] for row in m]


def _to_dict(stats: ExpertStats) -> dict:
    return {
        "format": STATS_FORMAT,
        "mode": stats.mode,
        "k_used": stats.k_used,
        "tokens_seen": stats.tokens_seen,
        "subject_key": stats.subject_key,
        "counts": _matrix(stats.counts, stats.mode),
        "per_subject": {
            s: {"tokens_seen": stats.subject_tokens[s], "counts": _matrix(stats.per_subject[s], stats.mode)}
            for s in stats.subjects()
        },
    }


def _dumps(stats: ExpertStats) -> str:
    return json.dumps(_to_dict(stats), indent=1, sort_keys=True) + "\n"


def save_stats(stats: ExpertStats, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dumps(stats))
    return path


def load_stats(path) -> ExpertStats:
    d = json.loads(Path(path).read_text())
    if d.get("format") != STATS_FORMAT:
        raise ValueError(f"{path}: not a moelab stats file")
    stats = ExpertStats(
        d["mode"], np.array(d["counts"]), tokens_seen=d["tokens_seen"], k_used=d["k_used"], subject_key=d["subject_key"]
    )
    for s, entry in d["per_subject"].items():
        stats.per_subject[s] = np.array(entry["counts"], dtype=stats.counts.dtype)
        stats.subject_tokens[s] = entry["tokens_seen"]
    return stats
