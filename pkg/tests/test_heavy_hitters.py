import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moelab.heavy_hitters import (
    ExpertStats,
    export_heatmap,
    load_stats,
    marginal_estimate,
    merge,
    merge_all,
    read_heatmap_csv,
    record,
    save_stats,
)
from moelab.model import RoutingRecord, route_batch

import oracles


def _rec(probs, selected, layer=0):
    probs = np.asarray(probs, dtype=np.float64)
    selected = np.asarray(selected, dtype=np.int64)
    if selected.ndim == 1:
        selected = selected[:, None]
    w = np.full(selected.shape, 1.0 / selected.shape[1])
    return RoutingRecord(layer, probs, selected, w)


def _random_batch(rng, n_layer, n_exp, k, n_tok):
    recs = []
    for l in range(n_layer):
        keep = np.ones(n_exp, bool)
        keep[rng.choice(n_exp, size=n_exp - max(k, int(rng.integers(k, n_exp + 1))), replace=False)] = False
        recs.append(route_batch(rng.normal(size=(n_tok, n_exp)) * 3, k, keep, l))
    return recs


def test_activation_tally_example():
    probs = np.eye(4)[[0, 0, 2]]
    st_ = record(ExpertStats.empty("activation", 1, 4), [_rec(probs, [0, 0, 2])])
    assert st_.counts.tolist() == [[2, 0, 1, 0]]
    assert st_.tokens_seen == 3 and st_.k_used == 1
    assert np.allclose(marginal_estimate(st_), [[2 / 3, 0, 1 / 3, 0]])


def test_soft_counts_example():
    st_ = record(ExpertStats.empty("soft", 1, 2), [_rec([[0.25, 0.75], [0.5, 0.5]], [1, 0])])
    assert st_.counts.tolist() == [[0.75, 1.25]]
    assert np.allclose(marginal_estimate(st_), [[0.375, 0.625]])


def test_empty_batch_is_identity():
    st_ = ExpertStats.empty("soft", 2, 3)
    recs = [_rec(np.zeros((0, 3)), np.zeros((0, 1)), l) for l in range(2)]
    record(st_, recs)
    assert st_.tokens_seen == 0 and not st_.counts.any()
    with pytest.raises(ValueError):
        marginal_estimate(st_)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        record(ExpertStats.empty("soft", 2, 3), [_rec(np.eye(3), [0, 1, 2])])
    with pytest.raises(ValueError):
        record(ExpertStats.empty("soft", 1, 4), [_rec(np.eye(3), [0, 1, 2])])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(2, 6), st.data())
def test_conservation(seed, n_layer, n_exp, data):
    k = data.draw(st.integers(1, n_exp))
    rng = np.random.default_rng(seed)
    act = ExpertStats.empty("activation", n_layer, n_exp)
    soft = ExpertStats.empty("soft", n_layer, n_exp)
    for _ in range(3):
        recs = _random_batch(rng, n_layer, n_exp, k, int(rng.integers(0, 20)))
        for r in recs:
            assert all(len(set(row)) == k for row in r.selected.tolist())
        record(act, recs)
        record(soft, recs)
    assert act.counts.dtype == np.int64
    assert np.all(act.counts.sum(axis=1) == k * act.tokens_seen)
    assert np.all(np.abs(soft.counts.sum(axis=1) - soft.tokens_seen) <= 1e-6)


def test_order_independence_and_merge():
    rng = np.random.default_rng(3)
    batches = [_random_batch(rng, 2, 5, 2, int(rng.integers(1, 30))) for _ in range(6)]
    for mode in ("activation", "soft"):
        fwd, rev = ExpertStats.empty(mode, 2, 5), ExpertStats.empty(mode, 2, 5)
        for b in batches:
            record(fwd, b)
        for b in reversed(batches):
            record(rev, b)
        if mode == "activation":
            assert np.array_equal(fwd.counts, rev.counts)
        else:
            assert np.allclose(fwd.counts, rev.counts, atol=1e-6, rtol=0)
        parts = [ExpertStats.empty(mode, 2, 5) for _ in range(2)]
        for i, b in enumerate(batches):
            record(parts[i % 2], b, subject=f"s{i % 3}")
        merged = merge_all(parts)
        assert merged.tokens_seen == fwd.tokens_seen
        assert np.allclose(merged.counts, fwd.counts, atol=1e-9)
        pooled = sum(merged.per_subject[s] for s in merged.subjects())
        assert np.allclose(pooled, merged.counts, atol=1e-9)
        assert sum(merged.subject_tokens.values()) == merged.tokens_seen


def test_merge_rejects_mismatch():
    with pytest.raises(ValueError):
        merge(ExpertStats.empty("soft", 1, 2), ExpertStats.empty("activation", 1, 2))
    with pytest.raises(ValueError):
        merge(ExpertStats.empty("soft", 1, 2), ExpertStats.empty("soft", 1, 3))


def test_subject_view():
    st_ = ExpertStats.empty("activation", 1, 3)
    record(st_, [_rec(np.eye(3)[[0, 0]], [0, 0])], subject="math")
    record(st_, [_rec(np.eye(3)[[2]], [2])], subject="law")
    assert st_.subjects() == ["law", "math"]
    assert st_.subject("math").counts.tolist() == [[2, 0, 0]]
    assert st_.subject("law").tokens_seen == 1
    with pytest.raises(KeyError):
        st_.subject("art")


def test_uniform_router_within_binomial_bound():
    n = 20_000
    st_ = oracles.synthetic_router_stats([0.25] * 4, n, seed=11, mode="activation")
    sigma = np.sqrt(0.25 * 0.75 / n)
    assert np.all(np.abs(marginal_estimate(st_) - 0.25) < 3 * sigma)


def test_monte_carlo_soft_marginal():
    p = np.array([0.5, 0.2, 0.15, 0.1, 0.05])
    st_ = oracles.synthetic_router_stats(p, 100_000, seed=0)
    assert np.max(np.abs(marginal_estimate(st_)[0] - p)) < 0.02


def test_heatmap_csv_example(tmp_path):
    st_ = ExpertStats("activation", [[1, 3], [2, 2]], tokens_seen=4, k_used=1)
    csv_path, pgm_path = export_heatmap(st_, tmp_path / "hm")
    assert csv_path.read_text().rstrip("\n") == "0.25,0.75\n0.5,0.5"
    assert np.array_equal(read_heatmap_csv(csv_path), [[0.25, 0.75], [0.5, 0.5]])
    raw = pgm_path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [0, 255, 128, 128]


def test_constant_heatmap_is_single_gray(tmp_path):
    st_ = ExpertStats("activation", [[2, 2, 2], [2, 2, 2]], tokens_seen=6, k_used=1)
    _, pgm = export_heatmap(st_, tmp_path / "flat")
    assert set(pgm.read_bytes()[-6:]) == {0}


def test_heatmap_unwritable_path(tmp_path):
    st_ = ExpertStats("activation", [[1, 1]], tokens_seen=2, k_used=1)
    with pytest.raises(OSError):
        export_heatmap(st_, tmp_path / "missing" / "dir" / "hm")


def test_stats_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for mode in ("activation", "soft"):
        st_ = ExpertStats.empty(mode, 2, 4)
        record(st_, _random_batch(rng, 2, 4, 2, 9), subject="a")
        record(st_, _random_batch(rng, 2, 4, 2, 5), subject="b")
        back = load_stats(save_stats(st_, tmp_path / f"{mode}.json"))
        assert back.mode == mode and back.k_used == 2 and back.tokens_seen == 14
        assert np.array_equal(back.counts, st_.counts)
        assert back.counts.dtype == st_.counts.dtype
        assert np.array_equal(back.per_subject["b"], st_.per_subject["b"])
        assert back.content_hash() == st_.content_hash()
