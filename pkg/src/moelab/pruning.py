"""Turn routing statistics into expert keep-masks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .heavy_hitters import ExpertStats
from .model import ExpertMask, ModelConfig

MASK_FORMAT = "moelab-mask/1"


class PruningError(ValueError):
    pass


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def n_removed(sparsity: float, n_total: int) -> int:
    if not 0.0 <= sparsity < 1.0:
        raise PruningError(f"sparsity must be in [0, 1), got {sparsity}")
    return round_half_away(sparsity * n_total)


@dataclass(frozen=True)
class PruneSpec:
    strategy: str = "global"  # layer | global | random
    counting: str = "soft"  # activation | soft
    sparsity: float | None = 0.25
    keep_per_layer: int | None = None
    keep_total: int | None = None
    min_keep_per_layer: int = 2
    subject_specific: bool = False
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.strategy not in ("layer", "global", "random"):
            raise PruningError(f"unknown strategy {self.strategy!r}")
        if self.counting not in ("activation", "soft"):
            raise PruningError(f"unknown counting mode {self.counting!r}")
        if self.sparsity is None and self.keep_per_layer is None and self.keep_total is None:
            raise PruningError("give sparsity, keep_per_layer or keep_total")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        amount = f"{self.sparsity:g}" if self.sparsity is not None else f"k{self.keep_per_layer or self.keep_total}"
        if self.strategy == "random":
            return f"random-{amount}" + (f"-s{self.seed}" if self.seed else "")
        subj = "-subject" if self.subject_specific else ""
        return f"{self.counting}-{self.strategy}-{amount}{subj}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> PruneSpec:
        return cls(**d)

    def resolve_keep_per_layer(self, n_experts: int) -> int:
        if self.keep_per_layer is not None:
            return self.keep_per_layer
        if self.sparsity is None:
            raise PruningError("layer strategy needs sparsity or keep_per_layer")
        return n_experts - n_removed(self.sparsity, n_experts)

    def resolve_keep_total(self, n_layer: int, n_experts: int) -> int:
        if self.keep_total is not None:
            return self.keep_total
        if self.keep_per_layer is not None:
            return self.keep_per_layer * n_layer
        return n_layer * n_experts - n_removed(self.sparsity, n_layer * n_experts)


def _counts(stats) -> np.ndarray:
    c = stats.counts if isinstance(stats, ExpertStats) else np.asarray(stats)
    if c.ndim != 2:
        raise PruningError("counts must be a (n_layer, n_experts) matrix")
    return c


def _rank_key(c: np.ndarray) -> np.ndarray:
    """Flat (layer, expert) positions ordered by count desc, then lexicographically."""
    flat = c.reshape(-1)
    # lexsort's last key is primary; ties keep flat index order = (layer, expert)
    return np.lexsort((np.arange(flat.size), -flat.astype(np.float64)))


def prune_layerwise(stats, keep_per_layer: int, min_keep: int = 1) -> ExpertMask:
    """Keep the ``keep_per_layer`` heaviest experts of every layer."""
    c = _counts(stats)
    n_layer, n_experts = c.shape
    if not (min_keep <= keep_per_layer <= n_experts) or keep_per_layer < 1:
        raise PruningError(f"keep_per_layer={keep_per_layer} outside [{max(min_keep, 1)}, {n_experts}]")
    keep = np.zeros_like(c, dtype=bool)
    for l in range(n_layer):
        order = np.lexsort((np.arange(n_experts), -c[l].astype(np.float64)))
        keep[l, order[:keep_per_layer]] = True
    return ExpertMask(keep)


def prune_global(stats, keep_total: int, min_keep: int = 1) -> ExpertMask:
    """Keep the ``keep_total`` heaviest experts network-wide, then repair layers below ``min_keep``.

    Repair promotes a starved layer's heaviest removed expert and demotes the
    lightest kept expert among layers holding more than ``min_keep``; repeated
    until every layer is feasible.
    """
    c = _counts(stats)
    n_layer, n_experts = c.shape
    if min_keep > n_experts:
        raise PruningError(f"min_keep={min_keep} exceeds n_experts={n_experts}")
    if not (n_layer * max(min_keep, 1) <= keep_total <= n_layer * n_experts):
        raise PruningError(
            f"keep_total={keep_total} infeasible for {n_layer} layers x {n_experts} experts with min_keep={min_keep}"
        )
    order = _rank_key(c)
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    keep = np.zeros(c.size, dtype=bool)
    keep[order[:keep_total]] = True
    keep = keep.reshape(n_layer, n_experts)
    rank = rank.reshape(n_layer, n_experts)
    while True:
        per_layer = keep.sum(axis=1)
        starved = np.flatnonzero(per_layer < min_keep)
        if starved.size == 0:
            break
        l = int(starved[0])
        removed = np.flatnonzero(~keep[l])
        promote = removed[np.argmin(rank[l, removed])]
        donors = per_layer > min_keep
        cand = keep & donors[:, None]
        # lightest kept = largest rank among candidates
        flat = np.where(cand, rank, -1).reshape(-1)
        victim = int(np.argmax(flat))
        keep[l, promote] = True
        keep.reshape(-1)[victim] = False
    return ExpertMask(keep)


def prune_random(config: ModelConfig, sparsity: float, min_keep: int = 1, seed: int = 0) -> ExpertMask:
    """Remove ``round(sparsity * L * E)`` uniformly chosen experts, never dropping a layer below ``min_keep``."""
    L, E = config.n_layer, config.n_experts
    n_remove = n_removed(sparsity, L * E)
    if n_remove > L * (E - min_keep):
        raise PruningError(f"cannot remove {n_remove} experts with min_keep={min_keep}")
    rng = np.random.default_rng(seed)
    keep = np.ones((L, E), dtype=bool)
    left = keep.sum(axis=1)
    removed = 0
    for pos in rng.permutation(L * E):
        if removed == n_remove:
            break
        l, j = divmod(int(pos), E)
        if left[l] > min_keep:
            keep[l, j] = False
            left[l] -= 1
            removed += 1
    return ExpertMask(keep)


def apply_spec(stats: ExpertStats | None, spec: PruneSpec, config: ModelConfig) -> ExpertMask:
    L, E = config.n_layer, config.n_experts
    if spec.strategy == "random":
        if spec.sparsity is None:
            raise PruningError("random pruning needs a sparsity")
        return prune_random(config, spec.sparsity, spec.min_keep_per_layer, spec.seed)
    if stats is None:
        raise PruningError(f"{spec.strategy} pruning needs statistics")
    if stats.mode != spec.counting:
        raise PruningError(f"spec wants {spec.counting} counts, stats are {stats.mode}")
    if stats.shape != (L, E):
        raise PruningError(f"stats shape {stats.shape} does not match model ({L}, {E})")
    if spec.strategy == "layer":
        return prune_layerwise(stats, spec.resolve_keep_per_layer(E), spec.min_keep_per_layer)
    return prune_global(stats, spec.resolve_keep_total(L, E), spec.min_keep_per_layer)


def prune_subject_specific(stats: ExpertStats, spec: PruneSpec, config: ModelConfig, subjects=None) -> dict[str, ExpertMask]:
    """One mask per subject from that subject's statistics alone."""
    wanted = stats.subjects() if subjects is None else [str(s) for s in subjects]
    masks = {}
    for s in wanted:
        if s not in stats.per_subject:
            raise PruningError(f"missing statistics for subject {s!r}")
        sub = stats.subject(s)
        if sub.tokens_seen <= 0:
            raise PruningError(f"subject {s!r} has no recorded tokens")
        masks[s] = apply_spec(sub, spec, config)
    return masks


def save_mask(mask: ExpertMask, path, spec: PruneSpec | None = None, stats_hash: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": MASK_FORMAT,
        "n_layer": mask.n_layer,
        "n_experts": mask.n_experts,
        "kept": mask.kept(),
        "spec": spec.to_dict() if spec is not None else None,
        "stats_sha256": stats_hash,
        "min_keep_repair": spec is not None and spec.strategy == "global",
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_mask(path) -> tuple[ExpertMask, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MASK_FORMAT:
        raise ValueError(f"{path}: not a moelab mask file")
    return ExpertMask.from_kept(doc["kept"], doc["n_experts"]), doc
