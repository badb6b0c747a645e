"""Finite-difference cases shared by the unit suite and the acceptance run.

Each case maps an RNG to ``(fn, inputs)`` where ``fn()`` rebuilds a scalar from
the float64 leaf tensors in ``inputs``. Shapes are drawn small and random.
"""

import numpy as np

from moelab.tensor import Tensor, ops


def _leaf(rng, shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _probe(rng, shape):
    # random readout so every output entry reaches the loss with its own weight
    return Tensor(rng.normal(size=shape))


def _dims(rng, n, lo=1, hi=4):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=n))


def case_add(rng):
    s = _dims(rng, 2)
    a, b = _leaf(rng, s), _leaf(rng, (1, s[1]))
    r = _probe(rng, s)
    return lambda: ops.sum(ops.add(a, b) * r), [a, b]


def case_sub(rng):
    s = _dims(rng, 3)
    a, b = _leaf(rng, s), _leaf(rng, s[-1:])
    r = _probe(rng, s)
    return lambda: ops.sum(ops.sub(a, b) * r), [a, b]


def case_mul(rng):
    s = _dims(rng, 2)
    a, b = _leaf(rng, s), _leaf(rng, (s[0], 1))
    r = _probe(rng, s)
    return lambda: ops.sum(ops.mul(a, b) * r), [a, b]


def case_matmul(rng):
    m, k, n = _dims(rng, 3)
    a, b = _leaf(rng, (m, k)), _leaf(rng, (k, n))
    r = _probe(rng, (m, n))
    return lambda: ops.sum(ops.matmul(a, b) * r), [a, b]


def case_matmul_batched(rng):
    bt, m, k, n = _dims(rng, 4, hi=3)
    a, b = _leaf(rng, (bt, m, k)), _leaf(rng, (k, n))
    r = _probe(rng, (bt, m, n))
    return lambda: ops.sum(ops.matmul(a, b) * r), [a, b]


def case_sum_axis(rng):
    s = _dims(rng, 3)
    a = _leaf(rng, s)
    ax = int(rng.integers(0, 3))
    r = _probe(rng, s[:ax] + (1,) + s[ax + 1 :])
    return lambda: ops.sum(ops.sum(a, axis=ax, keepdims=True) * r), [a]


def case_mean(rng):
    s = _dims(rng, 2)
    a = _leaf(rng, s)
    r = _probe(rng, (s[1],))
    return lambda: ops.sum(ops.mean(a, axis=0) * r), [a]


def case_reshape_transpose(rng):
    s = _dims(rng, 3)
    a = _leaf(rng, s)
    r = _probe(rng, (s[2], s[0] * s[1]))
    return lambda: ops.sum(ops.reshape(ops.transpose(a, (2, 0, 1)), (s[2], -1)) * r), [a]


def case_exp(rng):
    a = _leaf(rng, _dims(rng, 2))
    r = _probe(rng, a.shape)
    return lambda: ops.sum(ops.exp(a) * r), [a]


def case_log(rng):
    a = _leaf(rng, _dims(rng, 2), 0.5, 2.0)
    r = _probe(rng, a.shape)
    return lambda: ops.sum(ops.log(a) * r), [a]


def case_gelu(rng):
    a = _leaf(rng, _dims(rng, 2), -3.0, 3.0)
    r = _probe(rng, a.shape)
    return lambda: ops.sum(ops.gelu(a) * r), [a]


def case_softmax(rng):
    a = _leaf(rng, _dims(rng, 2, lo=2), -2.0, 2.0)
    r = _probe(rng, a.shape)
    return lambda: ops.sum(ops.softmax(a) * r), [a]


def case_softmax_masked(rng):
    n, e = _dims(rng, 2, lo=2, hi=5)
    a = _leaf(rng, (n, e), -2.0, 2.0)
    keep = rng.random(e) < 0.6
    keep[int(rng.integers(e))] = True
    r = _probe(rng, (n, e))
    return lambda: ops.sum(ops.softmax(a, mask=keep[None, :]) * r), [a]


def case_log_softmax(rng):
    a = _leaf(rng, _dims(rng, 2, lo=2), -2.0, 2.0)
    r = _probe(rng, a.shape)
    return lambda: ops.sum(ops.log_softmax(a) * r), [a]


def case_cross_entropy(rng):
    n, v = _dims(rng, 2, lo=2, hi=5)
    a = _leaf(rng, (n, v), -2.0, 2.0)
    t = rng.integers(0, v, size=n)
    t[0] = -1 if n > 1 else t[0]
    return lambda: ops.cross_entropy(a, t), [a]


def case_entropy(rng):
    a = _leaf(rng, _dims(rng, 2, lo=2), -2.0, 2.0)
    r = _probe(rng, (a.shape[0],))
    return lambda: ops.sum(ops.entropy(ops.softmax(a)) * r), [a]


def case_entropy_direct(rng):
    a = _leaf(rng, _dims(rng, 2, lo=2), 0.1, 1.0)
    return lambda: ops.sum(ops.entropy(a)), [a]


def case_layer_norm(rng):
    n, d = _dims(rng, 2, lo=2, hi=5)
    x, g, b = _leaf(rng, (n, d)), _leaf(rng, (d,)), _leaf(rng, (d,))
    r = _probe(rng, (n, d))
    return lambda: ops.sum(ops.layer_norm(x, g, b) * r), [x, g, b]


def case_embedding(rng):
    v, d = _dims(rng, 2, lo=2, hi=5)
    w = _leaf(rng, (v, d))
    ids = rng.integers(0, v, size=_dims(rng, 2))
    r = _probe(rng, ids.shape + (d,))
    return lambda: ops.sum(ops.embedding(w, ids) * r), [w]


def case_take_rows(rng):
    n, d = _dims(rng, 2, lo=2)
    x = _leaf(rng, (n, d))
    rows = rng.integers(0, n, size=n + 2)  # repeats exercise accumulation
    r = _probe(rng, (rows.size, d))
    return lambda: ops.sum(ops.take_rows(x, rows) * r), [x]


def case_take_along_last(rng):
    n, e = _dims(rng, 2, lo=2, hi=5)
    x = _leaf(rng, (n, e))
    k = int(rng.integers(1, e + 1))
    idx = np.argsort(rng.random((n, e)), axis=1)[:, :k]
    r = _probe(rng, (n, k))
    return lambda: ops.sum(ops.take_along_last(x, idx) * r), [x]


def case_scatter_rows_sum(rng):
    n, d = _dims(rng, 2, lo=2)
    rows = [rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False) for _ in range(2)]
    parts = [_leaf(rng, (r.size, d)) for r in rows]
    probe = _probe(rng, (n, d))
    return lambda: ops.sum(ops.scatter_rows_sum(parts, rows, n) * probe), parts


def case_concat(rng):
    d = int(rng.integers(1, 4))
    xs = [_leaf(rng, (int(rng.integers(1, 4)), d)) for _ in range(3)]
    r = _probe(rng, (sum(x.shape[0] for x in xs), d))
    return lambda: ops.sum(ops.concat(xs, axis=0) * r), xs


def case_composite(rng):
    # 3x4 composite from the docs: two-layer net with softmax readout
    x = _leaf(rng, (3, 4))
    w = _leaf(rng, (4, 4))
    return lambda: ops.sum(ops.entropy(ops.softmax(ops.gelu(x @ w) * x))), [x, w]


CASES = {name[5:]: fn for name, fn in sorted(globals().items()) if name.startswith("case_")}


def tiny_model_config(seed=0, **kw):
    from moelab.model import ModelConfig

    base = dict(d_model=8, n_layer=2, n_head=2, d_attn=8, d_ff=8, n_experts=4, n_topk=2,
                n_vocab=12, n_ctx=4, seed=seed, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def full_loss_case(rng, lam=0.1, names=None):
    """Cross-entropy plus entropy penalty through the whole MoE model."""
    from moelab.finetune import LossConfig, total_loss
    from moelab.model import ExpertMask, MoEModel

    cfg = tiny_model_config(seed=int(rng.integers(1 << 30)))
    model = MoEModel(cfg)
    tokens = rng.integers(0, cfg.n_vocab, size=(2, cfg.n_ctx))
    targets = rng.integers(0, cfg.n_vocab, size=(2, cfg.n_ctx))
    keep = np.ones((cfg.n_layer, cfg.n_experts), bool)
    keep[1, int(rng.integers(cfg.n_experts))] = False
    mask = ExpertMask(keep)
    loss_cfg = LossConfig(lam=lam)

    def fn():
        out = model.forward(tokens, mask)
        return total_loss(out.logits, targets, [r.gate_tensor for r in out.records], loss_cfg)[0]

    chosen = sorted(model.params) if names is None else names
    return fn, [model.params[n] for n in chosen]
