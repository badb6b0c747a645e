"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line (collected in the pytest summary) and then
asserts at the stated tolerance. Criteria 7-9 share one five-seed experiment.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from moelab import cost_model as cm
from moelab.harness import PipelineConfig, default_experiment, run_pipeline
from moelab.heavy_hitters import ExpertStats, marginal_estimate, record
from moelab.model import ExpertMask, ModelConfig, MoEModel
from moelab.pruning import PruneSpec, prune_global, prune_layerwise
from moelab.tensor import check_gradients

import gradcases
import oracles

SEEDS = (0, 1, 2, 3, 4)


def test_1_gradient_correctness(acceptance):
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for case in gradcases.CASES.values():
        for seed in range(20):
            worst = max(worst, check_gradients(*case(np.random.default_rng(seed)), step=1e-5))
            checked += 1
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        worst = max(worst, check_gradients(*gradcases.full_loss_case(rng), step=1e-5, max_entries=6, rng=rng))
        checked += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    acceptance(1, ok, f"{checked} checks, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_2_routing_and_counting_conservation(acceptance):
    rng = np.random.default_rng(42)
    bad = []
    batches = 0
    for trial in range(12):
        e = int(rng.integers(2, 9))
        cfg = gradcases.tiny_model_config(seed=trial, n_experts=e, n_topk=1, dtype="float32")
        model = MoEModel(cfg)
        k = int(rng.integers(1, e + 1))
        keep = np.zeros((cfg.n_layer, e), bool)
        for l in range(cfg.n_layer):
            keep[l, rng.choice(e, size=int(rng.integers(k, e + 1)), replace=False)] = True
        mask = ExpertMask(keep)
        act = ExpertStats.empty("activation", cfg.n_layer, e)
        soft = ExpertStats.empty("soft", cfg.n_layer, e)
        for _ in range(4):
            tokens = rng.integers(0, cfg.n_vocab, size=(int(rng.integers(1, 6)), int(rng.integers(1, cfg.n_ctx + 1))))
            recs = model.forward(tokens, mask, k).records
            batches += 1
            for r in recs:
                sel = r.selected
                distinct = all(len(set(row)) == k for row in sel.tolist())
                if sel.shape[1] != k or not distinct or not keep[r.layer][sel].all():
                    bad.append(("selection", trial))
                if np.any(r.gate_probs[:, ~keep[r.layer]] != 0):
                    bad.append(("masked mass", trial))
            record(act, recs)
            record(soft, recs)
        if not np.all(act.counts.sum(axis=1) == k * act.tokens_seen):
            bad.append(("activation sum", trial))
        if np.max(np.abs(soft.counts.sum(axis=1) - soft.tokens_seen)) > 1e-6:
            bad.append(("soft sum", trial))
    ok = not bad
    acceptance(2, ok, f"{batches} random batches, violations: {bad or 'none'}")
    assert ok


def test_3_monte_carlo_consistency(acceptance):
    p = np.array([0.4, 0.25, 0.15, 0.1, 0.06, 0.04])
    st = oracles.synthetic_router_stats(p, 100_000, seed=2024)
    dev = float(np.max(np.abs(marginal_estimate(st)[0] - p)))
    ok = st.tokens_seen == 100_000 and dev < 0.02
    acceptance(3, ok, f"max |estimate - p| = {dev:.4f} at 100k tokens (tol 0.02)")
    assert ok


def test_4_pruning_oracle_equivalence(acceptance):
    rng = np.random.default_rng(4)
    mismatches, ties, scale_bad = 0, 0, 0
    for i in range(1000):
        L, E = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        c = rng.integers(0, 3, size=(L, E)) if i % 2 else rng.integers(0, 10**6, size=(L, E))
        ties += int(np.unique(c).size < c.size)
        mk = int(rng.integers(1, E + 1))
        kt = int(rng.integers(mk * L, L * E + 1))
        lay, glob = prune_layerwise(c, mk), prune_global(c, kt, mk)
        mismatches += not np.array_equal(lay.keep, oracles.brute_layerwise(c, mk))
        mismatches += not np.array_equal(glob.keep, oracles.mandatory_then_fill(c, kt, mk))
        if c.size <= 12:
            mismatches += not np.array_equal(glob.keep, oracles.brute_global(c, kt, mk))
        for factor in (3, 1000):
            scale_bad += prune_global(c * factor, kt, mk) != glob
            scale_bad += prune_layerwise(c * factor, mk) != lay
        halved = c.astype(np.float64) * 0.5  # exact in binary floating point
        scale_bad += prune_global(halved, kt, mk) != glob
    ok = mismatches == 0 and scale_bad == 0
    acceptance(4, ok, f"1000 instances ({ties} with ties): {mismatches} oracle mismatches, {scale_bad} scale failures")
    assert ok


def test_5_cost_model_exactness(acceptance):
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(100):
        n_head = int(rng.integers(1, 9))
        d = n_head * int(rng.integers(1, 1025))
        e = int(rng.integers(2, 65))
        cfg = ModelConfig(d_model=d, n_layer=int(rng.integers(1, 129)), n_head=n_head, d_attn=d, d_ff=4 * d,
                          n_experts=e, n_topk=2, n_vocab=int(rng.integers(1, 200_001)),
                          n_ctx=int(rng.integers(1, 131_073)), ff_matrices=2)
        rep = cm.cost_report(cfg)
        bad += rep.n_params_core != cm.eq1_params(cfg)
        bad += rep.c_fwd_core != cm.eq2_flops(cfg)
        red = cm.reduction_report(cfg, None, 2, 1)
        bad += (1 - red.flops_multiplier) != red.expert_share / 2
        bad += not isinstance(red.flops_multiplier, Fraction)
    ok = bad == 0
    acceptance(5, ok, f"100 random configs, {bad} inexact totals or identity failures")
    assert ok


def test_6_mixtral_like_numbers(acceptance):
    cfg = cm.PRESETS["mixtral-like"]
    m25 = float(cm.reduction_report(cfg, 0.25).memory_multiplier)
    m50 = float(cm.reduction_report(cfg, 0.5).memory_multiplier)
    red = cm.reduction_report(cfg, None, 2, 1)
    cut = float(1 - red.flops_multiplier)
    share = float(red.expert_share)
    ok = (
        abs(m25 - 0.76) <= 0.04
        and 0.52 <= m50 <= 0.59
        and (1 - red.flops_multiplier) == red.expert_share / 2
        and abs(cut - 0.27) <= 0.05
    )
    acceptance(6, ok, f"memory x{m25:.4f} (25%), x{m50:.4f} (50%); k 2->1 FLOPs cut {cut:.4f}, expert share {share:.4f}")
    assert ok


@pytest.fixture(scope="session")
def experiments(tmp_path_factory):
    root = tmp_path_factory.mktemp("seeds")
    reports = {}
    for s in SEEDS:
        reports[s] = run_pipeline(default_experiment(s), root / f"seed{s}")
    return root, reports


def _rows(report):
    return {r["label"]: r for r in report["pruning"]}


def _ft(report):
    return {r["name"]: r for r in report["finetune"]}


def test_7_heavy_hitters_beats_random(experiments, acceptance):
    _, reports = experiments
    parts, ok = [], True
    for sp in ("0.25", "0.5"):
        hh = np.mean([_rows(r)[f"soft-global-{sp}"]["accuracy_drop"] for r in reports.values()])
        rnd = np.mean([_rows(r)[f"random-{sp}"]["accuracy_drop"] for r in reports.values()])
        ok &= bool(hh <= rnd)
        parts.append(f"{float(sp):.0%}: heavy-hitters drop {hh:.2f} vs random {rnd:.2f} pts")
    acceptance(7, ok, f"{len(reports)} seeds; " + "; ".join(parts))
    assert ok


def test_8_global_beats_layer(experiments, acceptance):
    _, reports = experiments
    parts, ok = [], True
    for counting in ("soft", "activation"):
        for sp in ("0.25", "0.5"):
            g = np.mean([_rows(r)[f"{counting}-global-{sp}"]["accuracy"] for r in reports.values()])
            lay = np.mean([_rows(r)[f"{counting}-layer-{sp}"]["accuracy"] for r in reports.values()])
            ok &= bool(g >= lay)
            parts.append(f"{counting} {float(sp):.0%}: global {g:.4f} vs layer {lay:.4f}")
    acceptance(8, ok, f"{len(reports)} seeds; " + "; ".join(parts))
    assert ok


def test_9_topk_adaptation_orderings(experiments, acceptance):
    _, reports = experiments
    n = len(reports)
    a = sum(r["dense"]["zero_shot_by_k"]["1"] < r["dense"]["zero_shot_by_k"]["2"] for r in reports.values())
    b = sum(_ft(r)["k1"]["accuracy"] > _ft(r)["k1"]["zero_shot_accuracy"] for r in reports.values())
    c = sum(_ft(r)["k1-entropy"]["mean_gate_entropy"] < _ft(r)["k1"]["mean_gate_entropy"] for r in reports.values())
    ok = min(a, b, c) > n / 2
    acceptance(9, ok, f"seeds satisfying (a) zero-shot k1<k2: {a}/{n}, (b) tuned k1>zero-shot k1: {b}/{n}, "
                      f"(c) entropy(lambda>0)<entropy(lambda=0): {c}/{n}")
    assert ok


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_10_pipeline_identity_and_reruns(experiments, acceptance, tmp_path):
    root, reports = experiments
    ident = PipelineConfig(
        prune=[PruneSpec("global", "soft", 0.0), PruneSpec("layer", "activation", 0.0), PruneSpec("random", sparsity=0.0)],
    ).seeded(0)
    rep = run_pipeline(ident, tmp_path / "identity")
    dense = rep["dense"]["accuracy"]
    same = all(r["accuracy"] == dense for r in rep["pruning"])
    # the zero-sparsity pipeline shares its pretrain stage with the seed-0 experiment
    same &= dense == reports[0]["dense"]["accuracy"]
    again = run_pipeline(default_experiment(0), tmp_path / "rerun")
    first, second = _tree_bytes(root / "seed0"), _tree_bytes(tmp_path / "rerun")
    identical = first == second and again == reports[0]
    ok = same and identical
    acceptance(10, ok, f"sparsity-0 accuracy == dense ({dense:.4f}): {same}; rerun byte-identical over "
                       f"{len(first)} files: {identical}")
    assert ok
