"""Build the Python extension and exercise it end to end on a tiny run.

Usage: python3 python/smoke_test.py [--skip-build]
"""

import json
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build_and_stage(dest):
    subprocess.run(
        ["cargo", "build", "--release", "-p", "rffi-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = os.path.join(ROOT, "target", "release", "librffi_py.so")
    if not os.path.exists(lib):
        lib = os.path.join(ROOT, "target", "release", "librffi_py.dylib")
    shutil.copy(lib, os.path.join(dest, "rffi_py.so"))


def main():
    stage = tempfile.mkdtemp(prefix="rffi_py_")
    if "--skip-build" in sys.argv:
        shutil.copy(os.path.join(ROOT, "target", "release", "librffi_py.so"), os.path.join(stage, "rffi_py.so"))
    else:
        build_and_stage(stage)
    sys.path.insert(0, stage)
    import rffi_py

    grid = rffi_py.device_grid(7)
    assert len(grid) == 7
    assert abs(grid[0][1] + 0.9) < 1e-12 and abs(grid[6][2] - 3.0) < 1e-12

    assert rffi_py.nmi([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert rffi_py.nmi([0, 0, 1, 1], [0, 1, 0, 1]) == 0.0

    ls, mmse = rffi_py.estimator_error(15.0, trials=2000, seed=1)
    assert abs(ls - 10 ** -1.5) < 0.1 * 10 ** -1.5, ls
    assert mmse < ls, (mmse, ls)

    work = tempfile.mkdtemp(prefix="rffi_run_")
    path = os.path.join(work, "d.rffd")
    assert rffi_py.generate_dataset(path, devices=3, packets_per_device=5, seed=4) == 15
    assert rffi_py.dataset_labels(path) == [0] * 5 + [1] * 5 + [2] * 5
    info = json.loads(rffi_py.inspect(path))
    assert info["kind"] == "dataset" and info["info"]["packets_per_device"] == 5

    config = {
        "devices": {"count": 2},
        "data": {"packets_per_device": 20, "target_packets_per_device": 20},
        "model": {"backbone": {"widths": [4, 4], "kernel_sizes": [3, 3], "pool_factors": [2, 2]},
                  "projector_hidden": 8, "projector_out": 8, "predictor_hidden": 4, "classifier_hidden": 4},
        "pretrain": {"epochs": 2, "batch_size": 8, "nmi_window": 2, "nmi_restarts": 2},
        "finetune": {"label_fraction": 0.1, "patience": 2, "max_epochs": 3},
        "eval": {"snr_db": [10.0, 20.0], "nmi_restarts": 2, "export_features": False},
    }
    text = json.dumps(config)
    out = os.path.join(work, "run")
    for command in ["gen", "pretrain", "finetune", "eval"]:
        summary = json.loads(rffi_py.run(command, text, out))
        print(command, "ok")
    assert len(summary["snr_sweep"]) == 2
    assert 0.0 <= summary["accuracy"] <= 1.0

    try:
        rffi_py.run("bogus", text, out)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown command accepted")

    shutil.rmtree(work)
    shutil.rmtree(stage)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
