"""Builds the gmm_comet extension, imports it and exercises every binding."""

import json
import math
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build_extension() -> Path:
    subprocess.run(
        ["cargo", "build", "--release", "-p", "comet-py"],
        cwd=ROOT,
        check=True,
    )
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target")) / "release"
    for name in ("libgmm_comet.so", "libgmm_comet.dylib"):
        lib = target / name
        if lib.exists():
            out = Path(tempfile.mkdtemp()) / "gmm_comet.so"
            shutil.copy(lib, out)
            return out.parent
    raise FileNotFoundError(f"no gmm_comet library in {target}")


def main() -> None:
    sys.path.insert(0, str(build_extension()))
    import gmm_comet as gc

    p = gc.softmax([1.0, 2.0, 3.0])
    assert abs(sum(p) - 1.0) < 1e-12
    assert gc.softmax([101.0, 102.0, 103.0]) == p

    assert gc.h_score(0.6, 0.4) == 0.48
    assert gc.h_score(0.3, 0.3) == 0.3
    assert gc.normalized_entropy([0.25] * 4) == 1.0
    assert abs(gc.normalized_entropy([0.75, 0.25]) - 0.8113) < 1e-4

    assert gc.assign([0.1, 0.9], -1.0, 0.0, 1.0) == ("known", 1)
    assert gc.assign([0.1, 0.9], 2.0, 0.0, 1.0) == ("unknown", None)
    assert gc.assign([0.1, 0.9], 0.5, 0.0, 1.0) == ("ignored", None)
    assert gc.decide_inference([0.6, 0.4], [0.1, 0.9], 0.0, 0.0, 1.0) == 1
    assert gc.decide_inference([0.6, 0.4], [0.1, 0.9], 0.9, 0.0, 1.0) == 2

    g = gc.GmmState(2, 2, 1.0, cov_reg=1.0)
    g.update([[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0], [3.0, 4.0]])
    assert g.initialized() == [True, True]
    assert g.means() == [[0.0, 0.0], [3.0, 4.0]]
    assert g.mahalanobis_score([0.0, 0.0]) == 0.0
    assert g.mahalanobis_score([3.0, 5.0]) == 1.0
    r = g.responsibilities([1.5, 2.0])
    assert abs(r[0] - r[1]) < 1e-12
    assert abs(g.entropy_score([1.5, 2.0]) - 1.0) < 1e-12
    assert json.loads(g.to_json())["num_classes"] == 2
    try:
        g.update([[0.5, 0.2]], [[0.0, 0.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("off-simplex probabilities were accepted")

    cal = gc.ThresholdCalibrator(0.5, 2)
    assert cal.thresholds() is None
    cal.observe([float(i) for i in range(101)])
    assert not cal.frozen
    cal.observe([float(i) for i in range(101)])
    assert cal.frozen
    assert cal.thresholds() == (25.0, 75.0)

    config = """
config_version = 1
seeds = [1]

[engine]
n_init = 3
hidden = [16]
feature_dim = 8
reduced_dim = 4
pretrain = { epochs = 10 }

[[scenario]]
name = "opda"
kind = "OPDA"
split = [2, 1, 2]
source_samples_per_class = 40
batch_size = 16

[[scenario.domain]]
rotation_deg = 15
batches = 5

[[variant]]
name = "full"
"""
    runs = json.loads(gc.run_suite(config))
    assert len(runs) == 1 and runs[0]["status"] == "ok", runs
    report = runs[0]["report"]
    assert report["metric"] == "h_score" and report["num_batches"] == 5
    assert 0.0 <= report["average"] <= 1.0 and not math.isnan(report["average"])
    assert json.loads(gc.run_suite(config)) == runs
    print("gmm_comet smoke test passed")


if __name__ == "__main__":
    main()
