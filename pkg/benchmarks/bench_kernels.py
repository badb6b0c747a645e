"""Time the numba kernels against their numpy twins, then a whole training step.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Kernel timings call the ``*_np`` and ``*_nb`` functions directly. The training
step and a statistics pass are measured in two fresh interpreters, one with
MOELAB_DISABLE_NUMBA=1.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from moelab import _accel


def kernel_cases(rng):
    logits = rng.normal(size=(4096, 8))
    probs = rng.dirichlet(np.ones(8), size=4096)
    sel = _accel.topk_rows_np(logits, 2)
    x32 = rng.normal(size=(2048, 256)).astype(np.float32)
    _, t32 = _accel.gelu_fwd_np(x32)
    rows = rng.integers(0, 512, size=4096)
    src = rng.normal(size=(4096, 64)).astype(np.float32)
    dst = np.zeros((512, 64), np.float32)
    w = rng.normal(size=(256, 1024)).astype(np.float32)
    gw = rng.normal(size=w.shape).astype(np.float32)
    mw, vw = np.zeros_like(w), np.zeros_like(w)
    adam_args = (1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8, 0.01)
    return {
        "topk_rows (4096x8, k=2)": (lambda f: f(logits, 2), _accel.topk_rows_np, _accel.topk_rows_nb),
        "tally (4096x2 -> 8)": (lambda f: f(sel, 8), _accel.tally_np, _accel.tally_nb),
        "column_sums (4096x8)": (lambda f: f(probs), _accel.column_sums_np, _accel.column_sums_nb),
        "index_add_rows (4096x64 -> 512)": (lambda f: f(dst, rows, src), _accel.index_add_rows_np,
                                            _accel.index_add_rows_nb),
        "gelu_fwd (2048x256 f32)": (lambda f: f(x32), _accel.gelu_fwd_np, _accel.gelu_fwd_nb),
        "gelu_bwd (2048x256 f32)": (lambda f: f(x32, t32, x32), _accel.gelu_bwd_np, _accel.gelu_bwd_nb),
        "adamw_update (256x1024 f32)": (lambda f: f(w, gw, mw, vw, *adam_args), _accel.adamw_update_np,
                                        _accel.adamw_update_nb),
    }


STEP_SNIPPET = """
import json, time
import numpy as np
from moelab import _accel
from moelab.finetune import LossConfig, TopKSchedule, TrainConfig, train
from moelab.harness import collect_stats
from moelab.model import MoEModel, ModelConfig
from moelab.tasks import SyntheticTask, datasets
_, tr, _ = datasets(SyntheticTask(n_train=512, n_val=8))
model = MoEModel(ModelConfig())
train(model, None, tr, TopKSchedule.static(2), LossConfig(), TrainConfig(steps=2))  # warm-up / jit
t = time.perf_counter()
train(model, None, tr, TopKSchedule.static(2), LossConfig(0.1), TrainConfig(steps={steps}))
step_ms = (time.perf_counter() - t) * 1000 / {steps}
collect_stats(model, tr.subset(np.arange(8)), "soft")
t = time.perf_counter()
for mode in ("soft", "activation"):
    collect_stats(model, tr, mode, batch_size=512)
count_ms = (time.perf_counter() - t) * 1000
print(json.dumps({{"numba": _accel.USE_NUMBA, "ms_per_step": step_ms, "count_ms": count_ms}}))
"""


def train_step_ms(disable: bool, steps: int) -> dict:
    env = dict(os.environ)
    env.pop("MOELAB_DISABLE_NUMBA", None)
    if disable:
        env["MOELAB_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    results = {"kernels": {}, "train_step": {}}
    print(f"{'kernel':<34} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (call, f_np, f_nb) in kernel_cases(np.random.default_rng(0)).items():
        call(f_nb)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: call(f_np), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: call(f_nb), number=1, repeat=args.repeat)) * 1e3
        results["kernels"][name] = {"numpy_ms": t_np, "numba_ms": t_nb}
        print(f"{name:<34} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x")

    fast = train_step_ms(False, args.steps)
    slow = train_step_ms(True, args.steps)
    results["train_step"] = {"numba_ms": fast["ms_per_step"], "numpy_ms": slow["ms_per_step"]}
    results["count_pass"] = {"numba_ms": fast["count_ms"], "numpy_ms": slow["count_ms"]}
    print()
    for label, key in (("training step, default model, batch 32", "ms_per_step"),
                       ("soft + activation counting, 512 examples", "count_ms")):
        print(f"{label:<42} numpy {slow[key]:7.1f} ms  numba {fast[key]:7.1f} ms  ({slow[key] / fast[key]:.2f}x)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
