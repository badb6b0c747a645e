"""Plain-array versions of the routing primitives, with input validation."""

from __future__ import annotations

import numpy as np

from .. import _accel


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("softmax expects a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input contains non-finite values")
    e = np.exp(v - v.max())
    return e / e.sum()


def entropy(p, atol: float = 1e-6) -> float:
    """Shannon entropy in nats; zero-probability entries contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("entropy expects a non-empty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("entropy expects non-negative finite probabilities")
    total = p.sum()
    if abs(total - 1.0) > atol:
        raise ValueError(f"probabilities sum to {total!r}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def arg_topk(v, k: int) -> list[int]:
    """Indices of the k largest values, descending; ties go to the lower index."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("arg_topk expects a vector")
    if not 1 <= k <= v.size:
        raise ValueError(f"k={k} out of range for length {v.size}")
    if np.isnan(v).any():
        raise ValueError("arg_topk input contains NaN")
    return [int(i) for i in _accel.topk_rows(v[None, :], k)[0]]
