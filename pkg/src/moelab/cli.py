"""Command-line entry point: ``moelab <subcommand>``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import cost_model
from .evaluation import evaluate
from .finetune import LossConfig, TrainingDiverged, train, write_metrics
from .harness import (
    FinetuneSpec, PipelineConfig, PipelineError, collect_stats, default_experiment, pretrain, run_pipeline,
)
from .heavy_hitters import export_heatmap, load_stats, save_stats
from .model import ExpertMask, ModelConfig, load_checkpoint, save_checkpoint
from .pruning import PruneSpec, apply_spec, load_mask, save_mask
from .tasks import generate_task, load_task


class StageFailure(Exception):
    def __init__(self, stage: str, msg: str):
        super().__init__(msg)
        self.stage = stage


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    return cfg.seeded(args.seed if getattr(args, "seed", None) is not None else cfg.seed)


def _mask(args, model) -> ExpertMask:
    if getattr(args, "mask", None):
        return load_mask(args.mask)[0]
    return ExpertMask.full(model.config.n_layer, model.config.n_experts)


def _split(args):
    _, _, splits = load_task(args.task)
    return splits


def _write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    generate_task(cfg.task, out / "task")
    splits = load_task(out / "task")[2]
    model, metrics = pretrain(cfg, splits["train"])
    save_checkpoint(model, out / "model.json", extra={"stage": "pretrain"})
    write_metrics(metrics, out / "metrics.jsonl")
    print(f"pretrained {cfg.pretrain.steps} steps, final loss {metrics[-1]['loss']:.4f} -> {out / 'model.json'}")


def cmd_count(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    data = _split(args)[args.split]
    st = collect_stats(model, data, args.mode, _mask(args, model), args.k)
    out = Path(args.out)
    save_stats(st, out / f"stats_{args.mode}.json")
    export_heatmap(st, out / f"heatmap_{args.mode}")
    print(f"counted {st.tokens_seen} tokens ({args.mode}) -> {out}")


def cmd_prune(args) -> None:
    if args.spec:
        spec = PruneSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        spec = PruneSpec(
            strategy=args.strategy,
            counting=args.counting,
            sparsity=args.sparsity,
            keep_per_layer=args.keep_per_layer,
            keep_total=args.keep_total,
            min_keep_per_layer=args.min_keep,
            seed=args.seed or 0,
        )
    stats = load_stats(args.stats) if args.stats else None
    if args.checkpoint:
        model_cfg = load_checkpoint(args.checkpoint)[0].config
    elif stats is not None:
        n_layer, n_experts = stats.shape
        model_cfg = ModelConfig(n_layer=n_layer, n_experts=n_experts, n_topk=1)
    else:
        raise StageFailure("prune", "need --stats or --checkpoint to know the model shape")
    mask = apply_spec(stats, spec, model_cfg)
    save_mask(mask, args.out, spec, stats.content_hash() if stats is not None else None)
    print(f"{spec.label}: kept per layer {mask.kept_per_layer()} -> {args.out}")


def cmd_finetune(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    data = _split(args)["train"]
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        # either a bare fine-tune spec or a pipeline config whose first entry is used
        specs = raw.get("finetune")
        if isinstance(specs, list) and not specs:
            raise StageFailure("finetune", "config has an empty finetune list")
        ft = FinetuneSpec.from_dict(specs[0] if isinstance(specs, list) else raw)
    else:
        ft = FinetuneSpec()
    if args.seed is not None:
        ft = replace(ft, train=replace(ft.train, seed=args.seed))
    mask = _mask(args, model)
    out = Path(args.out)
    res = train(model, mask, data, ft.schedule, LossConfig(lam=ft.lam), ft.train, log_path=None)
    save_checkpoint(model, out / "model.json", extra={"stage": "finetune", "spec": ft.to_dict()})
    write_metrics(res.metrics, out / "metrics.jsonl")
    print(f"fine-tuned {ft.train.steps} steps, final {res.final}")


def cmd_eval(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    data = _split(args)[args.split]
    res = evaluate(model, _mask(args, model), data, args.k)
    if args.json:
        _write_json(res.to_dict(), args.json)
    print(f"accuracy {res.accuracy:.4f} ({res.correct}/{res.total}), mean gate entropy {res.mean_gate_entropy:.4f}")


def cmd_cost(args) -> None:
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        cfg = ModelConfig.from_dict(raw.get("model", raw))
    else:
        cfg = cost_model.PRESETS[args.preset]
    rep = cost_model.cost_report(cfg, args.k_base)
    print(rep.format_table())
    ideal = cost_model.idealized_expert_share(cfg, args.k_base)
    print(f"closed-form expert FLOPs share {float(ideal):.4f}")
    doc = {"table": rep.to_dict(), "idealized_expert_share": float(ideal)}
    if args.sparsity is not None or args.mask or args.k_new is not None:
        target = load_mask(args.mask)[0] if args.mask else args.sparsity
        red = cost_model.reduction_report(cfg, target, args.k_base, args.k_new)
        doc["reduction"] = red.to_dict()
        print(
            f"memory x{float(red.memory_multiplier):.4f}  flops x{float(red.flops_multiplier):.4f}  "
            f"expert FLOPs share {float(red.expert_share):.4f}"
        )
    if args.json:
        _write_json(doc, args.json)


def cmd_pipeline(args) -> None:
    if args.default_grid:
        if args.config:
            raise ValueError("--default-grid and --config are exclusive")
        cfg = default_experiment(args.seed or 0)
    else:
        cfg = _config(args)
    report = run_pipeline(cfg, args.out)
    print(Path(args.out, "report.txt").read_text(), end="")
    print(f"report -> {Path(args.out) / 'report.json'} (dense accuracy {report['dense']['accuracy']:.4f})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moelab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", help="JSON pipeline config")
        sp.add_argument("--seed", type=int, default=None)
        if out:
            sp.add_argument("--out", required=True, help="output directory or file")

    sp = sub.add_parser("pretrain", help="generate the task and pretrain a model")
    common(sp)
    sp.set_defaults(fn=cmd_pretrain, stage="pretrain")

    sp = sub.add_parser("count", help="collect heavy-hitters statistics")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", required=True, help="task directory")
    sp.add_argument("--split", default="train", choices=("train", "val"))
    sp.add_argument("--mode", default="soft", choices=("soft", "activation"))
    sp.add_argument("--mask")
    sp.add_argument("--k", type=int, default=None)
    sp.set_defaults(fn=cmd_count, stage="count")

    sp = sub.add_parser("prune", help="build an expert mask")
    common(sp, config=False)
    sp.add_argument("--stats")
    sp.add_argument("--checkpoint")
    sp.add_argument("--spec", help="JSON PruneSpec")
    sp.add_argument("--strategy", default="global", choices=("layer", "global", "random"))
    sp.add_argument("--counting", default="soft", choices=("soft", "activation"))
    sp.add_argument("--sparsity", type=float, default=None)
    sp.add_argument("--keep-per-layer", type=int, default=None)
    sp.add_argument("--keep-total", type=int, default=None)
    sp.add_argument("--min-keep", type=int, default=2)
    sp.set_defaults(fn=cmd_prune, stage="prune")

    sp = sub.add_parser("finetune", help="top-k adaptation with optional entropy penalty")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--mask")
    sp.set_defaults(fn=cmd_finetune, stage="finetune")

    sp = sub.add_parser("eval", help="greedy answer accuracy")
    common(sp, config=False, out=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--split", default="val", choices=("train", "val"))
    sp.add_argument("--mask")
    sp.add_argument("--k", type=int, default=None)
    sp.add_argument("--json")
    sp.set_defaults(fn=cmd_eval, stage="eval")

    sp = sub.add_parser("cost", help="parameter / FLOPs table and pruning what-ifs")
    sp.add_argument("--config", help="JSON model config (or pipeline config with a 'model' key)")
    sp.add_argument("--preset", default="mixtral-like", choices=sorted(cost_model.PRESETS))
    sp.add_argument("--sparsity", type=float, default=None)
    sp.add_argument("--mask")
    sp.add_argument("--k-base", type=int, default=None)
    sp.add_argument("--k-new", type=int, default=None)
    sp.add_argument("--json")
    sp.set_defaults(fn=cmd_cost, stage="cost")

    sp = sub.add_parser("pipeline", help="run the full two-stage experiment")
    common(sp)
    sp.add_argument("--default-grid", action="store_true", help="run the built-in pruning / fine-tune grid")
    sp.set_defaults(fn=cmd_pipeline, stage="pipeline")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageFailure as exc:
        print(f"error: stage '{exc.stage}' failed: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, OSError, ValueError, TypeError, KeyError, IndexError) as exc:
        print(f"error: stage '{args.stage}' failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
