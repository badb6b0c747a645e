import json
import os
import subprocess
import sys

import numpy as np
import pytest

from moelab import _accel

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def _tied_values(rng, n, m):
    # small integer grid forces many ties; sprinkle -inf like masked experts
    v = rng.integers(-2, 3, size=(n, m)).astype(np.float64)
    v[rng.random((n, m)) < 0.2] = -np.inf
    return v


@pytest.mark.parametrize("seed", range(5))
def test_topk_paths_agree_exactly(seed):
    rng = np.random.default_rng(seed)
    for m in (1, 3, 8):
        v = _tied_values(rng, 50, m)
        for k in range(1, m + 1):
            assert np.array_equal(_accel.topk_rows_np(v, k), _accel.topk_rows_nb(v, k))


def test_tally_and_index_add_agree():
    rng = np.random.default_rng(0)
    sel = rng.integers(0, 6, size=(40, 2))
    assert np.array_equal(_accel.tally_np(sel, 6), _accel.tally_nb(sel, 6))
    rows = rng.integers(0, 5, size=30)
    src = rng.normal(size=(30, 4))
    a, b = np.zeros((5, 4)), np.zeros((5, 4))
    _accel.index_add_rows_np(a, rows, src)
    _accel.index_add_rows_nb(b, rows, src)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_column_sums_same_order_same_bits():
    probs = np.random.default_rng(1).dirichlet(np.ones(5), size=300)
    assert np.array_equal(_accel.column_sums_np(probs), _accel.column_sums_nb(probs))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_gelu_paths_agree(dtype):
    x = np.random.default_rng(2).normal(scale=3, size=(7, 9)).astype(dtype)
    g = np.random.default_rng(3).normal(size=x.shape).astype(dtype)
    y0, t0 = _accel.gelu_fwd_np(x)
    y1, t1 = _accel.gelu_fwd_nb(x)
    tol = 1e-6 if dtype == np.float32 else 1e-14
    assert np.allclose(y0, y1, rtol=tol, atol=tol)
    assert np.allclose(_accel.gelu_bwd_np(x, t0, g), _accel.gelu_bwd_nb(x, t1, g), rtol=tol, atol=tol)


_PROBE = """
import json, numpy as np
from moelab import _accel
from moelab.model import ModelConfig, MoEModel
m = MoEModel(ModelConfig(d_model=16, d_attn=16, d_ff=32, n_vocab=32, n_ctx=8, dtype="float64"))
out = m.forward(np.arange(16).reshape(2, 8) % 32)
print(json.dumps({"numba": _accel.USE_NUMBA,
                  "logits": out.logits.data.ravel().tolist(),
                  "sel": [r.selected.tolist() for r in out.records]}))
"""


def _probe(disable: bool) -> dict:
    env = dict(os.environ)
    env.pop("MOELAB_DISABLE_NUMBA", None)
    if disable:
        env["MOELAB_DISABLE_NUMBA"] = "1"
    res = subprocess.run([sys.executable, "-c", _PROBE], env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def test_env_flag_selects_path_and_model_agrees():
    fast, slow = _probe(False), _probe(True)
    assert fast["numba"] is True and slow["numba"] is False
    assert fast["sel"] == slow["sel"]
    assert np.allclose(fast["logits"], slow["logits"], rtol=0, atol=1e-12)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_adamw_paths_agree(dtype):
    rng = np.random.default_rng(4)
    state = [rng.normal(size=(6, 5)).astype(dtype) for _ in range(2)] + [np.zeros((6, 5), dtype) for _ in range(2)]
    a = [x.copy() for x in state]
    b = [x.copy() for x in state]
    for t in range(1, 4):
        g = rng.normal(size=(6, 5)).astype(dtype)
        args = (1e-2, 0.9, 0.999, 1 - 0.9**t, 1 - 0.999**t, 1e-8, 0.01)
        _accel.adamw_update_np(a[0], g, a[2], a[3], *args)
        _accel.adamw_update_nb(b[0], g, b[2], b[3], *args)
    tol = 1e-6 if dtype == np.float32 else 1e-13
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=tol, atol=tol)
