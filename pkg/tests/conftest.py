import json

import numpy as np
import pytest
from hypothesis import settings

from riskprof.data import PatientTrace, Split, Subset

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")


def make_trace(cgm, carbs=None, *, timestamps=None, pid="p0", split=Split.TRAIN, subset=Subset.SYNTHETIC, cadence=300):
    cgm = np.asarray(cgm, dtype=float)
    n = cgm.size
    if timestamps is None:
        timestamps = np.arange(n, dtype=np.int64) * cadence
    if carbs is None:
        carbs = np.zeros(n)
    rng = np.random.default_rng(n)
    return PatientTrace(
        patient_id=pid,
        subset=subset,
        split=split,
        timestamps=np.asarray(timestamps, dtype=np.int64),
        cgm=cgm,
        basal=np.full(n, 0.8) + 0.1 * rng.random(n),
        bolus=np.zeros(n),
        carbs=np.asarray(carbs, dtype=float),
        cadence=cadence,
    )


@pytest.fixture
def trace_factory():
    return make_trace


def ring_windows(rng, n, radius=1.0, noise=0.05):
    """Benign 2-D points scattered around a circle, as (n, 1, 2) windows."""
    th = rng.uniform(0, 2 * np.pi, n)
    pts = radius * np.c_[np.cos(th), np.sin(th)] + rng.normal(0, noise * radius, (n, 2))
    return pts[:, None, :]


# a six-patient cohort and tiny models: the whole pipeline runs in about two seconds
SMALL_CONFIG = {
    "seed": 0,
    "cohort": {
        "n_patients": 6, "trace_len": 700, "seed": 3,
        "normal_fraction": [0.65, 0.92, 0.65, 0.65, 0.92, 0.65],
        "hypo_fraction": [0.15, 0.01, 0.15, 0.15, 0.01, 0.15],
        "regulation_tau": [90.0, 20.0, 90.0, 90.0, 20.0, 90.0],
    },
    "forecaster": {"hidden": 4, "max_epochs": 40, "min_windows": 0},
    "attack": {"max_iters": 8},
    "cluster": {"standardize": False, "transform": "sqrt", "order": "sorted"},
    "detect": {"random_runs": 2, "train_stride": 4},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
