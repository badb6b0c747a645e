import json
import sys
from pathlib import Path

import pytest

from moelab import _accel

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "benchmarks"))


@pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")
def test_benchmark_runs(tmp_path, capsys):
    import bench_kernels

    out = tmp_path / "bench.json"
    bench_kernels.main(["--repeat", "1", "--steps", "1", "--json", str(out)])
    doc = json.loads(out.read_text())
    assert set(doc) == {"kernels", "train_step", "count_pass"}
    assert all(v["numpy_ms"] > 0 and v["numba_ms"] > 0 for v in doc["kernels"].values())
    assert "speedup" in capsys.readouterr().out
