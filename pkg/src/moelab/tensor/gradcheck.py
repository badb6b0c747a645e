"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-5, indices=None) -> np.ndarray:
    """d fn() / d x by central differences, perturbing ``x.data`` in place.

    With ``indices`` (flat positions) only those entries are estimated; the
    rest of the result is left at zero.
    """
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn().data)
        flat[i] = orig - step
        down = float(fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    atol: float = 1e-8,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between backprop and finite differences.

    Entries where both gradients are below ``atol`` in magnitude are treated as
    agreeing, since their relative error is pure rounding noise. ``max_entries``
    caps the finite-difference probes per input at a random subset.
    """
    for x in inputs:
        x.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        idx = None
        if max_entries is not None and x.data.size > max_entries:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(gen.choice(x.data.size, size=max_entries, replace=False))
        numeric = numerical_grad(fn, x, step, idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        err = relative_error(analytic, numeric)
        tiny = (np.abs(analytic) < atol) & (np.abs(numeric) < atol)
        err = np.where(tiny, 0.0, err)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
