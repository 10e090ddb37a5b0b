"""Warm-up smoke descent across every training mode on the default corpus.

The four criterion modes reuse the session ablation runs; modes whose
warm-up streams are identical to one of those (same seed, same phase terms,
same RNG keys) are checked against the matching log.  The remaining modes
run their warm-up stage here.
"""

import csv
import os

import pytest

from depthadapt.synthworld import WorldConfig, build_corpus
from depthadapt.trainer import MODE_SPECS, TrainMode, TrainSchedule, Trainer

# mode -> ablation run whose warm-up stream is bit-identical
SHARED_WARMUP = {
    TrainMode.SYN: "SYN",
    TrainMode.SYN2REAL: "SYN2REAL",
    TrainMode.SYN2REAL_E2E: "SYN2REAL",
    TrainMode.SYN2REAL_GC: "SYN2REAL-GC-E2E",
    TrainMode.SYN2REAL_GC_E2E: "SYN2REAL-GC-E2E",
    TrainMode.GASDA: "GASDA",
}

FRESH_WARMUP = [TrainMode.SYN_GC, TrainMode.REAL,
                TrainMode.REAL2SYN_SYN_GC_E2E, TrainMode.GASDA_WO_DC]


def _phase_descent(rows):
    by_phase = {}
    for r in rows:
        by_phase.setdefault(r["phase"], []).append(float(r["total"]))
    checked = 0
    for phase, totals in by_phase.items():
        if not phase.startswith("warm"):
            continue
        checked += 1
        assert totals[-1] < totals[0], \
            f"{phase}: final epoch {totals[-1]} !< first epoch {totals[0]}"
    assert checked > 0


def test_shared_warmup_streams_are_identical():
    for mode, source in SHARED_WARMUP.items():
        src_mode = TrainMode(source.replace("-", "_"))
        assert MODE_SPECS[mode].depth_terms == MODE_SPECS[src_mode].depth_terms
        assert MODE_SPECS[mode].translator_warmup == \
            MODE_SPECS[src_mode].translator_warmup


@pytest.mark.slow
@pytest.mark.parametrize("mode", sorted(SHARED_WARMUP, key=lambda m: m.value))
def test_smoke_descent_criterion_modes(mode, ablation):
    run_dir = ablation["run_dirs"][SHARED_WARMUP[mode]]
    with open(os.path.join(run_dir, "log.csv")) as f:
        rows = list(csv.DictReader(f))
    _phase_descent(rows)


@pytest.fixture(scope="module")
def default_corpus():
    return build_corpus(WorldConfig(), 100)


@pytest.mark.slow
@pytest.mark.parametrize("mode", FRESH_WARMUP, ids=lambda m: m.value)
def test_smoke_descent_remaining_modes(mode, default_corpus):
    tr = Trainer(default_corpus, WorldConfig(), TrainSchedule(seed=0), mode)
    tr.warmup()
    _phase_descent(tr.log_rows)
