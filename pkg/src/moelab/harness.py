"""Two-stage experiment pipeline: pretrain, count, prune, fine-tune, evaluate, report."""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import cost_model
from .data import SequenceDataset
from .evaluation import EvalResult, evaluate, evaluate_subject_masks
from .finetune import LossConfig, TopKSchedule, TrainConfig, train, write_metrics
from .heavy_hitters import ExpertStats, export_heatmap, record, save_stats
from .model import ExpertMask, ModelConfig, MoEModel, load_checkpoint, save_checkpoint
from .pruning import PruneSpec, apply_spec, prune_subject_specific, save_mask
from .tasks import SyntheticTask, generate_task, load_task
from .tensor import no_grad

REPORT_FORMAT = "moelab-report/1"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


@dataclass
class FinetuneSpec:
    name: str = "ft"
    mask: str = "dense"  # "dense" or the label of a prune spec
    schedule: TopKSchedule = field(default_factory=lambda: TopKSchedule.static(1))
    lam: float = 0.0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=200, lr=1e-3))

    @classmethod
    def from_dict(cls, d: dict) -> FinetuneSpec:
        d = dict(d)
        if "schedule" in d:
            d["schedule"] = TopKSchedule(**d["schedule"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mask": self.mask,
            "schedule": self.schedule.to_dict(),
            "lam": self.lam,
            "train": self.train.to_dict(),
        }


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: SyntheticTask = field(default_factory=SyntheticTask)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(steps=600, lr=3e-3))
    aux_balance: float = 0.0
    counting_modes: tuple[str, ...] = ("soft", "activation")
    count_batch_size: int = 256
    prune: list[PruneSpec] = field(default_factory=list)
    finetune: list[FinetuneSpec] = field(default_factory=list)
    eval_k: int = 2
    seed: int = 0
    heatmaps: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        kw: dict[str, Any] = {}
        if "model" in d:
            kw["model"] = ModelConfig.from_dict(d.pop("model"))
        if "task" in d:
            kw["task"] = SyntheticTask.from_dict(d.pop("task"))
        if "pretrain" in d:
            kw["pretrain"] = TrainConfig.from_dict(d.pop("pretrain"))
        if "prune" in d:
            kw["prune"] = [PruneSpec.from_dict(p) for p in d.pop("prune")]
        if "finetune" in d:
            kw["finetune"] = [FinetuneSpec.from_dict(f) for f in d.pop("finetune")]
        if "counting_modes" in d:
            kw["counting_modes"] = tuple(d.pop("counting_modes"))
        d.pop("out_dir", None)
        kw.update(d)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> PipelineConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "task": self.task.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "aux_balance": self.aux_balance,
            "counting_modes": list(self.counting_modes),
            "count_batch_size": self.count_batch_size,
            "prune": [p.to_dict() for p in self.prune],
            "finetune": [f.to_dict() for f in self.finetune],
            "eval_k": self.eval_k,
            "seed": self.seed,
            "heatmaps": self.heatmaps,
        }

    def seeded(self, seed: int | None = None) -> PipelineConfig:
        """Derive every component seed from the master seed.

        Idempotent: prune seeds keep only their offset below 1000, so seeding an
        already seeded config (e.g. a saved ``config.json``) changes nothing.
        """
        s = self.seed if seed is None else int(seed)
        return replace(
            self,
            seed=s,
            model=replace(self.model, seed=s),
            task=replace(self.task, seed=s, n_vocab=self.model.n_vocab),
            pretrain=replace(self.pretrain, seed=s),
            prune=[replace(p, name=p.label, seed=s * 1000 + p.seed % 1000) for p in self.prune],
            # one shared seed so fine-tunes differing only in schedule or weight are paired
            finetune=[replace(f, train=replace(f.train, seed=s * 1000 + 500)) for f in self.finetune],
        )


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def pretrain(cfg: PipelineConfig, train_set: SequenceDataset, log_path=None) -> tuple[MoEModel, list[dict]]:
    model = MoEModel(cfg.model)
    res = train(
        model,
        None,
        train_set,
        TopKSchedule.static(cfg.model.n_topk),
        LossConfig(lam=0.0, aux_balance=cfg.aux_balance),
        cfg.pretrain,
        log_path=log_path,
    )
    return res.model, res.metrics


def collect_stats(
    model: MoEModel,
    data: SequenceDataset,
    mode: str,
    mask: ExpertMask | None = None,
    k: int | None = None,
    batch_size: int = 256,
) -> ExpertStats:
    """Counts over ``data`` grouped by subject (pooled counts are their sum)."""
    cfg = model.config
    stats = ExpertStats.empty(mode, cfg.n_layer, cfg.n_experts)
    k = cfg.n_topk if k is None else k
    with no_grad():
        for subject, part in sorted(data.by_subject().items()):
            for batch in part.batches(batch_size):
                out = model.forward(batch.tokens, mask, k)
                record(stats, out.records, subject=str(subject))
    return stats


def _eval_row(res: EvalResult, dense_acc: float) -> dict:
    return {
        "accuracy": res.accuracy,
        "accuracy_drop": (dense_acc - res.accuracy) * 100.0,
        "mean_gate_entropy": res.mean_gate_entropy,
        "per_subject": {str(k): v for k, v in sorted(res.per_subject.items())},
        "selection_hist": res.selection_hist.tolist(),
    }


def _cost(model_cfg: ModelConfig, mask: ExpertMask, k_base: int, k_new: int) -> dict:
    rep = cost_model.reduction_report(model_cfg, mask, k_base, k_new)
    return {
        "memory_multiplier": float(rep.memory_multiplier),
        "flops_multiplier": float(rep.flops_multiplier),
        "expert_share": float(rep.expert_share),
        "kept_per_layer": rep.kept_per_layer,
    }


def run_pipeline(cfg: PipelineConfig, out_dir) -> dict:
    """Run every stage, persisting artifacts under ``out_dir``; returns the report dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, str] = {}

    def keep(path: Path) -> None:
        artifacts[str(path.relative_to(out))] = file_sha256(path)

    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    keep(out / "config.json")

    with stage("task"):
        paths = generate_task(cfg.task, out / "task")
        for p in paths.values():
            keep(p)
        _, _, splits = load_task(out / "task")
        train_set, val_set = splits["train"], splits["val"]

    with stage("pretrain"):
        model, metrics = pretrain(cfg, train_set, log_path=None)
        ck = save_checkpoint(model, out / "pretrain" / "model.json", extra={"stage": "pretrain"})
        keep(ck)
        keep(ck.with_name(ck.name + ".bin"))
        keep(write_metrics(metrics, out / "pretrain" / "metrics.jsonl"))
        model, _ = load_checkpoint(ck)

    with stage("eval"):
        k = cfg.eval_k
        full = ExpertMask.full(cfg.model.n_layer, cfg.model.n_experts)
        dense = evaluate(model, full, val_set, k)
        zero_shot = {str(kk): evaluate(model, full, val_set, kk).accuracy for kk in range(1, k + 1)}

    stats: dict[str, ExpertStats] = {}
    with stage("count"):
        for mode in cfg.counting_modes:
            st = collect_stats(model, train_set, mode, full, k, cfg.count_batch_size)
            stats[mode] = st
            keep(save_stats(st, out / "count" / f"stats_{mode}.json"))
            if cfg.heatmaps:
                for p in export_heatmap(st, out / "count" / f"heatmap_{mode}"):
                    keep(p)

    masks: dict[str, ExpertMask | dict[str, ExpertMask]] = {"dense": full}
    prune_rows = []
    with stage("prune"):
        for spec in cfg.prune:
            st = stats.get(spec.counting) if spec.strategy != "random" else None
            if spec.strategy != "random" and st is None:
                raise ValueError(f"prune spec {spec.label} needs {spec.counting} counts, not collected")
            stats_hash = st.content_hash() if st is not None else None
            if spec.subject_specific and spec.strategy != "random":
                per = prune_subject_specific(st, spec, cfg.model)
                masks[spec.label] = per
                for s, m in per.items():
                    keep(save_mask(m, out / "prune" / spec.label / f"subject_{s}.json", spec, st.subject(s).content_hash()))
            else:
                m = apply_spec(st, spec, cfg.model)
                masks[spec.label] = m
                keep(save_mask(m, out / "prune" / f"{spec.label}.json", spec, stats_hash))

    with stage("eval"):
        for spec in cfg.prune:
            m = masks[spec.label]
            if isinstance(m, dict):
                res = evaluate_subject_masks(model, m, val_set, k)
                union = ExpertMask(np.logical_or.reduce([mm.keep for mm in m.values()]))
                cost = _cost(cfg.model, union, k, k)
                kept_per_subject = {s: mm.kept_per_layer() for s, mm in sorted(m.items())}
            else:
                res = evaluate(model, m, val_set, k)
                cost = _cost(cfg.model, m, k, k)
                kept_per_subject = None
            row = {"label": spec.label, "spec": spec.to_dict(), **_eval_row(res, dense.accuracy), **cost}
            if kept_per_subject is not None:
                row["kept_per_layer_by_subject"] = kept_per_subject
            prune_rows.append(row)

    ft_rows = []
    for ft in cfg.finetune:
        with stage(f"finetune:{ft.name}"):
            if ft.mask not in masks:
                raise KeyError(f"fine-tune {ft.name} refers to unknown mask {ft.mask!r}")
            m = masks[ft.mask]
            if isinstance(m, dict):
                raise ValueError("fine-tuning under subject-specific masks is not supported")
            ftm = model.copy()
            res = train(ftm, m, train_set, ft.schedule, LossConfig(lam=ft.lam), ft.train)
            d = out / "finetune" / ft.name
            ck = save_checkpoint(ftm, d / "model.json", extra={"stage": "finetune", "spec": ft.to_dict(), "mask": ft.mask})
            keep(ck)
            keep(ck.with_name(ck.name + ".bin"))
            keep(write_metrics(res.metrics, d / "metrics.jsonl"))
            ftm, _ = load_checkpoint(ck)
        with stage("eval"):
            k_new = ft.schedule.k_end
            ev = evaluate(ftm, m, val_set, k_new)
            zs = evaluate(model, m, val_set, k_new)
            ft_rows.append(
                {
                    "name": ft.name,
                    "mask": ft.mask,
                    "spec": ft.to_dict(),
                    "k": k_new,
                    "zero_shot_accuracy": zs.accuracy,
                    "final_train_metrics": res.final,
                    **_eval_row(ev, dense.accuracy),
                    **_cost(cfg.model, m, k, k_new),
                }
            )

    report = {
        "format": REPORT_FORMAT,
        "seed": cfg.seed,
        "dense": {"k": k, "accuracy": dense.accuracy, "mean_gate_entropy": dense.mean_gate_entropy,
                  "zero_shot_by_k": zero_shot},
        "pruning": prune_rows,
        "finetune": ft_rows,
        "notes": {
            "pretrain_aux_balance": cfg.aux_balance,
            "pretrain_aux_balance_enabled": bool(cfg.aux_balance),
            "entropy_aggregation": "mean over (token, MoE layer) pairs",
            "global_pruning_min_keep_repair": "extension: layers below min_keep_per_layer are repaired",
            "counting_split": "train",
            "defaults": "desk-scale hyperparameters chosen for this lab, not taken from a published run",
        },
        "artifacts": dict(sorted(artifacts.items())),
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    (out / "report.txt").write_text(format_report(report))
    return report


def format_report(report: dict) -> str:
    lines = [f"dense accuracy (k={report['dense']['k']}): {report['dense']['accuracy']:.4f}"]
    for kk, acc in sorted(report["dense"]["zero_shot_by_k"].items()):
        lines.append(f"  zero-shot k={kk}: {acc:.4f}")
    if report["pruning"]:
        lines.append("")
        lines.append(f"{'method':<34} {'sparsity':>8} {'drop':>8} {'memory':>8} {'flops':>8}")
        for r in report["pruning"]:
            sp = r["spec"]["sparsity"]
            sps = f"{sp:.0%}" if sp is not None else "-"
            lines.append(
                f"{r['label']:<34} {sps:>8} {r['accuracy_drop']:>8.2f} "
                f"x{r['memory_multiplier']:>7.3f} x{r['flops_multiplier']:>7.3f}"
            )
    if report["finetune"]:
        lines.append("")
        lines.append(f"{'fine-tune':<24} {'mask':<26} {'k':>2} {'zero-shot':>9} {'tuned':>7} {'H(gate)':>8}")
        for r in report["finetune"]:
            lines.append(
                f"{r['name']:<24} {r['mask']:<26} {r['k']:>2} {r['zero_shot_accuracy']:>9.4f} "
                f"{r['accuracy']:>7.4f} {r['mean_gate_entropy']:>8.4f}"
            )
    return "\n".join(lines) + "\n"


def default_experiment(seed: int = 0, ft_steps: int = 200) -> PipelineConfig:
    """The grid behind the desk-scale ordering checks."""
    prune = []
    for s in (0.25, 0.5):
        prune += [
            PruneSpec("global", "soft", s),
            PruneSpec("layer", "soft", s),
            PruneSpec("global", "activation", s),
            PruneSpec("layer", "activation", s),
            PruneSpec("random", "soft", s, seed=0),
            PruneSpec("global", "soft", s, subject_specific=True),
        ]
    ft_train = TrainConfig(steps=ft_steps, lr=1e-3)
    finetune = [
        FinetuneSpec("k1", "dense", TopKSchedule.static(1), 0.0, ft_train),
        FinetuneSpec("k1-entropy", "dense", TopKSchedule.static(1), 0.1, ft_train),
        FinetuneSpec("k1-anneal-entropy", "dense", TopKSchedule("anneal", 2, 1, 0.5), 0.1, ft_train),
        FinetuneSpec("k1-anneal-entropy-long", "dense", TopKSchedule("anneal", 2, 1, 0.5), 0.1,
                     replace(ft_train, steps=2 * ft_steps)),
        FinetuneSpec("k1-hh25", "soft-global-0.25", TopKSchedule("anneal", 2, 1, 0.5), 0.1, ft_train),
    ]
    return PipelineConfig(prune=prune, finetune=finetune, seed=seed).seeded(seed)
