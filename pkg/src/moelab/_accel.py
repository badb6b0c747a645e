"""Hot inner loops with an optional numba path.

Every kernel has a pure-numpy implementation (``*_np``) and, when numba is
importable, a jitted twin (``*_nb``). The public name binds to the jitted
version unless ``MOELAB_DISABLE_NUMBA`` is set to a truthy value before import.
Integer kernels agree exactly across paths, float kernels to rounding; tests
exercise each path directly.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("MOELAB_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None

HAVE_NUMBA = _nb is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


def _njit(fn):
    if not HAVE_NUMBA:
        return None
    return _nb.njit(cache=True, nogil=True)(fn)


# --- top-k per row --------------------------------------------------------


def topk_rows_np(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, descending, ties to lower index."""
    # stable sort on the negation keeps equal values in ascending index order
    order = np.argsort(-values, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k]).astype(np.int64)


def _topk_rows_loop(values, k):
    n, m = values.shape
    out = np.empty((n, k), dtype=np.int64)
    taken = np.zeros(m, dtype=np.bool_)
    for r in range(n):
        taken[:] = False
        for s in range(k):
            best = -1
            for j in range(m):
                if taken[j]:
                    continue
                if best < 0 or values[r, j] > values[r, best]:
                    best = j
            taken[best] = True
            out[r, s] = best
    return out


topk_rows_nb = _njit(_topk_rows_loop)


# --- activation tally -----------------------------------------------------


def tally_np(selected: np.ndarray, n_experts: int) -> np.ndarray:
    return np.bincount(selected.ravel(), minlength=n_experts).astype(np.int64)


def _tally_loop(selected, n_experts):
    out = np.zeros(n_experts, dtype=np.int64)
    n, k = selected.shape
    for r in range(n):
        for s in range(k):
            out[selected[r, s]] += 1
    return out


tally_nb = _njit(_tally_loop)


# --- row scatter-add (embedding backward) ---------------------------------


def index_add_rows_np(dst: np.ndarray, rows: np.ndarray, src: np.ndarray) -> None:
    np.add.at(dst, rows, src)


def _index_add_rows_loop(dst, rows, src):
    n, d = src.shape
    for r in range(n):
        t = rows[r]
        for c in range(d):
            dst[t, c] += src[r, c]


index_add_rows_nb = _njit(_index_add_rows_loop)


# --- soft-count accumulation ----------------------------------------------


def column_sums_np(probs: np.ndarray) -> np.ndarray:
    """Column sums accumulated row by row in 64-bit (fixed summation order)."""
    acc = np.zeros(probs.shape[1], dtype=np.float64)
    for row in probs.astype(np.float64, copy=False):
        acc += row
    return acc


def _column_sums_loop(probs):
    n, m = probs.shape
    acc = np.zeros(m, dtype=np.float64)
    for r in range(n):
        for j in range(m):
            acc[j] += probs[r, j]
    return acc


column_sums_nb = _njit(_column_sums_loop)


def _pick(np_fn, nb_fn):
    return nb_fn if (USE_NUMBA and nb_fn is not None) else np_fn


def topk_rows(values: np.ndarray, k: int) -> np.ndarray:
    fn = _pick(topk_rows_np, topk_rows_nb)
    return fn(np.ascontiguousarray(values, dtype=np.float64), int(k))


def tally(selected: np.ndarray, n_experts: int) -> np.ndarray:
    fn = _pick(tally_np, tally_nb)
    return fn(np.ascontiguousarray(selected, dtype=np.int64), int(n_experts))


def index_add_rows(dst: np.ndarray, rows: np.ndarray, src: np.ndarray) -> None:
    if USE_NUMBA and index_add_rows_nb is not None and dst.dtype == src.dtype:
        index_add_rows_nb(dst, np.ascontiguousarray(rows, dtype=np.int64), np.ascontiguousarray(src))
    else:
        index_add_rows_np(dst, rows, src)


def column_sums(probs: np.ndarray) -> np.ndarray:
    fn = _pick(column_sums_np, column_sums_nb)
    return fn(np.ascontiguousarray(probs, dtype=np.float64))


# --- fused AdamW update -----------------------------------------------------


def adamw_update_np(p, g, m, v, lr, b1, b2, c1, c2, eps, wd) -> None:
    """In-place Adam moment update and decoupled-decay step on one parameter."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    update = (m / c1) / (np.sqrt(v / c2) + eps)
    if wd:
        update = update + wd * p
    p -= (lr * update).astype(p.dtype)


def _adamw_loop(p, g, m, v, lr, b1, b2, c1, c2, eps, wd, one):
    pf, gf, mf, vf = p.ravel(), g.ravel(), m.ravel(), v.ravel()
    for i in range(pf.size):
        gi = gf[i]
        mi = b1 * mf[i] + (one - b1) * gi
        vi = b2 * vf[i] + (one - b2) * gi * gi
        mf[i] = mi
        vf[i] = vi
        pf[i] -= lr * ((mi / c1) / (np.sqrt(vi / c2) + eps) + wd * pf[i])


_adamw_kernel = _njit(_adamw_loop)


def adamw_update_nb(p, g, m, v, lr, b1, b2, c1, c2, eps, wd) -> None:
    # scalars typed like p keep float32 updates in float32 arithmetic
    t = p.dtype.type
    _adamw_kernel(p, g, m, v, t(lr), t(b1), t(b2), t(c1), t(c2), t(eps), t(wd), t(1.0))


def adamw_update(p, g, m, v, lr, b1, b2, c1, c2, eps, wd) -> None:
    fast = (
        USE_NUMBA
        and _adamw_kernel is not None
        and p.dtype == g.dtype == m.dtype == v.dtype
        and p.flags.c_contiguous and g.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous
    )
    if fast:
        adamw_update_nb(p, g, m, v, lr, b1, b2, c1, c2, eps, wd)
    else:
        adamw_update_np(p, g, m, v, lr, b1, b2, c1, c2, eps, wd)


# --- fused tanh-GELU --------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def gelu_fwd_np(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (gelu(x), tanh(inner)); the tanh is reused by the backward pass."""
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd_np(x: np.ndarray, t: np.ndarray, g: np.ndarray) -> np.ndarray:
    x2 = x * x
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _gelu_fwd_loop(x, c, a, one, half, two):
    # constants arrive typed like x, so float32 inputs stay in float32 arithmetic;
    # tanh via one exp keeps the loop vectorizable (scalar libm tanh is slow)
    flat = x.ravel()
    y = np.empty_like(flat)
    t = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        u = c * v * (one + a * v * v)
        e = np.exp(-two * np.abs(u))
        th = (one - e) / (one + e)
        if u < 0:
            th = -th
        t[i] = th
        y[i] = half * v * (one + th)
    return y.reshape(x.shape), t.reshape(x.shape)


def _gelu_bwd_loop(x, t, g):
    xf = x.ravel()
    tf = t.ravel()
    gf = g.ravel()
    out = np.empty_like(xf)
    for i in range(xf.size):
        v = xf[i]
        th = tf[i]
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        out[i] = gf[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner)
    return out.reshape(x.shape)


_gelu_fwd_kernel = _njit(_gelu_fwd_loop)


def gelu_fwd_nb(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = x.dtype.type
    return _gelu_fwd_kernel(x, f(_GELU_C), f(_GELU_A), f(1.0), f(0.5), f(2.0))


gelu_bwd_nb = _njit(_gelu_bwd_loop)


def gelu_fwd(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # numpy's SIMD tanh matches the jitted loop on large inputs and wins on the
    # small per-expert chunks the model produces, so both modes use it here;
    # gelu_fwd_nb stays available for the benchmark
    return gelu_fwd_np(np.ascontiguousarray(x))


def gelu_bwd(x: np.ndarray, t: np.ndarray, g: np.ndarray) -> np.ndarray:
    if USE_NUMBA and gelu_bwd_nb is not None and x.dtype == g.dtype:
        return gelu_bwd_nb(np.ascontiguousarray(x), np.ascontiguousarray(t), np.ascontiguousarray(g))
    return gelu_bwd_np(x, t, g)
