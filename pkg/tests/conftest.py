"""Shared fixtures: the four-mode ablation training run used by the
acceptance criteria and the warm-up descent checks."""

import os
import time

import pytest

from depthadapt.cli import main

ABLATION_MODES = ["SYN", "SYN2REAL", "SYN2REAL-GC-E2E", "GASDA"]


def run_ablation(base: str):
    """Default 200-sample corpus at seed 0, four modes, metric report."""
    data = os.path.join(base, "data")
    eval_data = os.path.join(base, "eval_data")
    assert main(["gen-data", "--out", data, "--count", "100", "--seed", "0"]) == 0
    assert main(["gen-data", "--out", eval_data, "--count", "16", "--seed", "1"]) == 0
    run_dirs = {}
    for mode in ABLATION_MODES:
        out = os.path.join(base, "runs", mode)
        assert main(["train", "--data", data, "--mode", mode, "--out", out,
                     "--seed", "0"]) == 0
        run_dirs[mode] = out
    report = os.path.join(base, "report.csv")
    assert main(["eval", "--runs", *run_dirs.values(), "--data", eval_data,
                 "--caps", "80,50", "--out", report]) == 0
    return run_dirs, report


@pytest.fixture(scope="session")
def ablation(tmp_path_factory):
    base = str(tmp_path_factory.mktemp("ablation"))
    t0 = time.time()
    run_dirs, report = run_ablation(base)
    return {"base": base, "run_dirs": run_dirs, "report": report,
            "elapsed": time.time() - t0}
