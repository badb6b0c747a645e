"""Analytical parameter and forward-FLOPs accounting for MoE transformers.

Rows follow the usual per-operation breakdown (embed, attention QKV / mask /
project, MoE feed-forward, MoE gating, de-embed); nonlinearities, biases and
layer norms are ignored. All arithmetic is exact Python integers; ratios are
``fractions.Fraction``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

from .model import ExpertMask, ModelConfig
from .pruning import n_removed

ROWS = (
    "Embed",
    "Attention:QKV",
    "Attention:Mask",
    "Attention:Project",
    "MoE Feedforward",
    "MoE Gating",
    "De-embed",
)

PRESETS: dict[str, ModelConfig] = {
    "table5-example": ModelConfig(
        d_model=2, n_layer=1, n_head=1, d_attn=2, d_ff=8, n_experts=1, n_topk=1, n_vocab=4, n_ctx=4
    ),
    # Table-literal two-matrix experts at Mixtral's 32k context
    "mixtral-like": ModelConfig(
        d_model=4096, n_layer=32, n_head=32, d_attn=4096, d_ff=14336,
        n_experts=8, n_topk=2, n_vocab=32000, n_ctx=32768, ff_matrices=2,
    ),
    # gated (three-matrix) experts at a 4k context
    "mixtral-gated": ModelConfig(
        d_model=4096, n_layer=32, n_head=32, d_attn=4096, d_ff=14336,
        n_experts=8, n_topk=2, n_vocab=32000, n_ctx=4096, ff_matrices=3,
    ),
    "desk": ModelConfig(),
}


@dataclass
class CostReport:
    config: ModelConfig
    params: dict[str, int]
    flops: dict[str, int]
    kept_per_layer: list[int] = field(default_factory=list)
    n_topk: int = 0

    @property
    def n_params(self) -> int:
        """Non-embedding parameters N."""
        return sum(v for k, v in self.params.items() if k != "Embed")

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def c_fwd(self) -> int:
        return sum(self.flops.values())

    @property
    def n_params_core(self) -> int:
        """N without the gating row (what the closed form approximates)."""
        return self.n_params - self.params["MoE Gating"]

    @property
    def c_fwd_core(self) -> int:
        """FLOPs without embed, de-embed and gating rows."""
        return self.c_fwd - self.flops["Embed"] - self.flops["De-embed"] - self.flops["MoE Gating"]

    @property
    def expert_ff_param_fraction(self) -> Fraction:
        return Fraction(self.params["MoE Feedforward"], self.total_params)

    @property
    def expert_ff_flops_fraction(self) -> Fraction:
        return Fraction(self.flops["MoE Feedforward"], self.c_fwd)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "kept_per_layer": self.kept_per_layer,
            "n_topk": self.n_topk,
            "rows": [{"operation": r, "params": self.params[r], "flops_per_token": self.flops[r]} for r in ROWS],
            "n_params": self.n_params,
            "total_params": self.total_params,
            "c_fwd": self.c_fwd,
            "expert_ff_param_fraction": float(self.expert_ff_param_fraction),
            "expert_ff_flops_fraction": float(self.expert_ff_flops_fraction),
        }

    def format_table(self) -> str:
        width = max(len(r) for r in ROWS)
        lines = [f"{'Operation':<{width}}  {'Parameters':>18}  {'FLOPs/token':>18}"]
        for r in ROWS:
            p = "-" if r == "Attention:Mask" or r == "De-embed" else f"{self.params[r]:,}"
            lines.append(f"{r:<{width}}  {p:>18}  {self.flops[r]:>18,}")
        lines.append(f"{'N / C_fwd':<{width}}  {self.n_params:>18,}  {self.c_fwd:>18,}")
        lines.append(f"expert FF share: params {float(self.expert_ff_param_fraction):.4f}, "
                     f"FLOPs {float(self.expert_ff_flops_fraction):.4f}")
        return "\n".join(lines)


def _kept(config: ModelConfig, kept_per_layer: Sequence[int] | None) -> list[int]:
    if kept_per_layer is None:
        return [config.n_experts] * config.n_layer
    kept = [int(k) for k in kept_per_layer]
    if len(kept) != config.n_layer:
        raise ValueError("kept_per_layer length must equal n_layer")
    if any(k < 0 or k > config.n_experts for k in kept):
        raise ValueError("kept counts must lie in [0, n_experts]")
    return kept


def param_table(config: ModelConfig, kept_per_layer: Sequence[int] | None = None) -> CostReport:
    c = config
    kept = _kept(c, kept_per_layer)
    experts = sum(kept)  # = n_experts * n_layer when unpruned
    params = {
        "Embed": (c.n_vocab + c.n_ctx) * c.d_model,
        "Attention:QKV": c.n_layer * c.d_model * 3 * c.d_attn,
        "Attention:Mask": 0,
        "Attention:Project": c.n_layer * c.d_attn * c.d_model,
        "MoE Feedforward": experts * c.ff_matrices * c.d_model * c.d_ff,
        "MoE Gating": experts * c.d_model,
        "De-embed": 0,
    }
    return CostReport(c, params, flops_table(c, kept_per_layer=kept).flops, kept, c.n_topk)


def flops_table(config: ModelConfig, n_topk: int | None = None, kept_per_layer: Sequence[int] | None = None) -> CostReport:
    c = config
    k = c.n_topk if n_topk is None else int(n_topk)
    kept = _kept(c, kept_per_layer)
    if any(k > m for m in kept):
        raise ValueError(f"n_topk={k} exceeds experts kept in some layer")
    flops = {
        "Embed": 4 * c.d_model,
        "Attention:QKV": 2 * c.n_layer * c.d_model * 3 * c.d_attn,
        "Attention:Mask": 2 * c.n_layer * c.n_ctx * c.d_attn,
        "Attention:Project": 2 * c.n_layer * c.d_attn * c.d_model,
        "MoE Feedforward": 2 * k * c.n_layer * c.ff_matrices * c.d_model * c.d_ff,
        "MoE Gating": 2 * sum(kept) * c.d_model,
        "De-embed": 2 * c.d_model * c.n_vocab,
    }
    params = {r: 0 for r in ROWS}
    return CostReport(c, params, flops, kept, k)


def cost_report(config: ModelConfig, n_topk: int | None = None, kept_per_layer=None) -> CostReport:
    rep = param_table(config, kept_per_layer)
    rep.flops = flops_table(config, n_topk, kept_per_layer).flops
    rep.n_topk = config.n_topk if n_topk is None else int(n_topk)
    return rep


def eq1_params(config: ModelConfig) -> int:
    return 4 * config.d_model**2 * config.n_layer * (1 + 2 * config.n_experts)


def eq2_flops(config: ModelConfig) -> int:
    c = config
    return 8 * c.d_model**2 * c.n_layer * (1 + 2 * c.n_topk) + 2 * c.n_layer * c.n_ctx * c.d_model


def idealized_expert_share(config: ModelConfig, n_topk: int | None = None) -> Fraction:
    """Expert FF share of the closed-form FLOPs (d_ff = 4 d_model, two matrices, no embed rows)."""
    c = config
    k = c.n_topk if n_topk is None else int(n_topk)
    return Fraction(16 * c.d_model**2 * c.n_layer * k, eq2_flops(replace(c, n_topk=k)))


@dataclass
class ReductionReport:
    memory_multiplier: Fraction
    flops_multiplier: Fraction
    expert_share: Fraction
    kept_per_layer: list[int]
    k_base: int
    k_new: int
    base: CostReport
    pruned: CostReport

    def to_dict(self) -> dict:
        return {
            "memory_multiplier": float(self.memory_multiplier),
            "flops_multiplier": float(self.flops_multiplier),
            "flops_reduction": float(1 - self.flops_multiplier),
            "expert_share": float(self.expert_share),
            "kept_per_layer": self.kept_per_layer,
            "k_base": self.k_base,
            "k_new": self.k_new,
            "base_total_params": self.base.total_params,
            "pruned_total_params": self.pruned.total_params,
            "base_c_fwd": self.base.c_fwd,
            "pruned_c_fwd": self.pruned.c_fwd,
        }


def reduction_report(
    base: ModelConfig,
    mask_or_sparsity: ExpertMask | float | Sequence[int] | None = None,
    k_base: int | None = None,
    k_new: int | None = None,
) -> ReductionReport:
    """Memory and FLOPs multipliers of a pruned / lower-k model against ``base``.

    ``mask_or_sparsity`` may be an ExpertMask, a per-layer kept-count list, or a
    global expert sparsity fraction (removals spread as evenly as possible,
    earlier layers losing the remainder).
    """
    k_base = base.n_topk if k_base is None else int(k_base)
    k_new = k_base if k_new is None else int(k_new)
    L, E = base.n_layer, base.n_experts
    if mask_or_sparsity is None:
        kept = [E] * L
    elif isinstance(mask_or_sparsity, ExpertMask):
        if mask_or_sparsity.keep.shape != (L, E):
            raise ValueError("mask shape does not match config")
        kept = mask_or_sparsity.kept_per_layer()
    elif isinstance(mask_or_sparsity, (float, int)) and not isinstance(mask_or_sparsity, bool):
        removed = n_removed(float(mask_or_sparsity), L * E)
        per, extra = divmod(removed, L)
        kept = [E - per - (1 if l < extra else 0) for l in range(L)]
    else:
        kept = [int(k) for k in mask_or_sparsity]
    if k_new > min(kept):
        raise ValueError(f"k_new={k_new} exceeds the {min(kept)} experts kept in some layer")
    base_rep = cost_report(base, k_base)
    pruned_rep = cost_report(base, k_new, kept)
    return ReductionReport(
        memory_multiplier=Fraction(pruned_rep.total_params, base_rep.total_params),
        flops_multiplier=Fraction(pruned_rep.c_fwd, base_rep.c_fwd),
        expert_share=base_rep.expert_ff_flops_fraction,
        kept_per_layer=kept,
        k_base=k_base,
        k_new=k_new,
        base=base_rep,
        pruned=pruned_rep,
    )


def dumps_report(rep: CostReport) -> str:
    return json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n"
