import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_trace
from riskprof.attack import AttackRecords, attack_trace
from riskprof.cluster import VulnerabilityClusters
from riskprof.data import Split
from riskprof.detect import KnnParams, OcsvmParams, fit_knn
from riskprof.evaluate import (
    ConfusionCounts,
    ExperimentConfig,
    Metrics,
    confusion,
    emit_plot_data,
    f1_score,
    mean_metrics,
    metrics,
    overlay_rows,
    run_experiment,
    tally,
)
from riskprof.predictor import LinearForecaster
from riskprof.synth import SyntheticCohortConfig, generate_synthetic_cohort

# -- counts and metrics -----------------------------------------------------


class FixedDetector:
    def __init__(self, verdicts):
        self.verdicts = np.asarray(verdicts, dtype=np.int8)

    def verdict_batch(self, windows):
        return self.verdicts[: len(windows)]


class _Data:
    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int8)
        self.windows = np.zeros((len(labels), 1, 1))

    def __len__(self):
        return len(self.labels)


LABELS = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]


def test_confusion_hand_tally():
    verdicts = [1, 0, 1, 1, 0, 1, 0, 0, 1, 0]
    assert confusion(FixedDetector(verdicts), _Data(LABELS)) == ConfusionCounts(tp=3, fp=2, tn=4, fn=1)


def test_confusion_extremes():
    perfect = confusion(FixedDetector(LABELS), _Data(LABELS))
    assert perfect.fn == perfect.fp == 0
    everything = confusion(FixedDetector([1] * 10), _Data(LABELS))
    assert everything.fn == everything.tn == 0
    with pytest.raises(ValueError, match="empty"):
        confusion(FixedDetector([]), _Data([]))
    with pytest.raises(ValueError):
        tally(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)


def test_metrics_examples():
    m = metrics(ConfusionCounts(tp=3, fp=2, tn=0, fn=1))
    assert m.recall == 0.75 and m.precision == 0.6
    assert m.f1 == pytest.approx(2 / 3)
    undefined = metrics(ConfusionCounts(tp=0, fp=3, tn=5, fn=0))
    assert undefined.recall is None and undefined.f1 is None
    assert undefined.to_dict()["recall"] == "undefined"
    assert f1_score(1.0, 1.0) == 1.0
    assert f1_score(0.0, 0.0) == 0.0


counts = st.builds(ConfusionCounts, *[st.integers(0, 1000)] * 4)


@given(counts)
def test_metric_identities(c):
    m = metrics(c)
    if c.tp + c.fn:
        assert m.recall == c.tp / (c.tp + c.fn)
    if c.tp + c.fp:
        assert m.precision == c.tp / (c.tp + c.fp)
    if m.f1 is not None:
        lo, hi = sorted((m.recall, m.precision))
        assert lo - 1e-12 <= m.f1 <= hi + 1e-12
        if m.recall and m.precision:
            assert 2 / m.f1 == pytest.approx(1 / m.recall + 1 / m.precision)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1) | st.none()), min_size=1, max_size=10), st.randoms(use_true_random=False))
def test_mean_over_runs_ignores_order(vals, rnd):
    runs = [Metrics(r, p, f1_score(r, p)) for r, p in vals]
    shuffled = list(runs)
    rnd.shuffle(shuffled)
    assert mean_metrics(runs) == mean_metrics(shuffled)
    if all(p is None for _, p in vals):
        assert mean_metrics(runs).precision is None


# -- experiment -------------------------------------------------------------


@pytest.fixture(scope="module")
def small_world():
    cfg = SyntheticCohortConfig(n_patients=4, trace_len=500, seed=2, normal_fraction=[0.9, 0.7, 0.7, 0.9])
    traces = generate_synthetic_cohort(cfg)
    w = np.zeros((6, 4))
    w[:, 0] = [0.05, 0.05, 0.1, 0.15, 0.25, 0.4]
    model = LinearForecaster(w, 0.0)
    records = AttackRecords.concat([attack_trace(model, t, horizon=3, max_iters=20) for t in traces])
    clusters = VulnerabilityClusters(frozenset({"p0", "p3"}), frozenset({"p1", "p2"}))
    config = ExperimentConfig(
        knn=KnnParams(k=3), ocsvm=OcsvmParams(nu=0.3), random_runs=3, history_len=6, horizon=3,
        train_stride={"ocsvm": 3},
    )
    report = run_experiment(traces, records, clusters, config, seed=5, provenance={"x": "y"})
    return traces, records, clusters, config, report, model


def test_experiment_cells(small_world):
    traces, _, _, _, report, _ = small_world
    assert {(c.detector, c.strategy) for c in report.cells} == {
        (d, s) for d in ("knn", "ocsvm") for s in ("LessVulnerable", "MoreVulnerable", "RandomSamples", "AllPatients")
    }
    assert report.cell("knn", "LessVulnerable").runs[0].cohort == ("p0", "p3")
    rs = report.cell("ocsvm", "RandomSamples")
    assert len(rs.runs) == 3 and all(len(r.cohort) == 3 for r in rs.runs)
    assert rs.metrics == mean_metrics([r.metrics for r in rs.runs])
    n_test = report.test_pool["benign"] + report.test_pool["malicious"]
    for c in report.cells:
        for r in c.runs:
            assert r.counts.total == n_test
            assert r.counts.tp + r.counts.fn == report.test_pool["malicious"]
            assert sum(pc.total for pc in r.per_patient.values()) == n_test
    assert report.provenance == {"x": "y"}


def test_experiment_is_deterministic(small_world):
    traces, records, clusters, config, report, _ = small_world
    again = run_experiment(traces, records, clusters, config, seed=5, provenance={"x": "y"})
    assert again.to_json() == report.to_json()


def test_single_strategy_config(small_world):
    traces, records, clusters, config, _, _ = small_world
    one = ExperimentConfig(**{**config.__dict__, "strategies": ("AllPatients",), "detectors": ("knn",)})
    rep = run_experiment(traces, records, clusters, one)
    assert [(c.detector, c.strategy) for c in rep.cells] == [("knn", "AllPatients")]
    assert "| knn | AllPatients |" in rep.to_markdown()
    assert "Change from" not in rep.to_markdown()


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(detectors=("forest",))
    with pytest.raises(ValueError):
        ExperimentConfig(strategies=("Everyone",))
    with pytest.raises(ValueError):
        ExperimentConfig(train_stride={"svm": 2})
    with pytest.raises(ValueError):
        ExperimentConfig(train_stride=0)
    assert ExperimentConfig(train_stride={"knn": 4}).stride_for("ocsvm") == 1


def test_report_json_and_markdown(small_world):
    report = small_world[4]
    d = json.loads(report.to_json())
    assert len(d["cells"]) == 8
    rs = next(c for c in d["cells"] if c["strategy"] == "RandomSamples")
    assert set(rs["spread"]) == {"recall", "precision", "f1"}
    md = report.to_markdown()
    assert md.count("\n| ") == 9  # header plus 8 cells
    assert "Change from AllPatients to LessVulnerable" in md


def test_plot_data_shapes(small_world, tmp_path):
    traces, records, _, config, report, _ = small_world
    test_traces = [t for t in traces if t.split is Split.TEST]
    det = fit_knn(np.random.default_rng(0).normal(100, 20, (30, 6, 4)), np.full((5, 6, 4), 300.0), KnnParams(k=3))
    overlay = overlay_rows(det, test_traces[0], records, 6, 3)
    paths = emit_plot_data(report, tmp_path, traces, {"knn__p0": overlay})
    names = sorted(p.name for p in paths)
    assert names == sorted(
        ["recall.csv", "precision.csv", "f1.csv", "per_patient.csv", "normal_to_abnormal_ratio.csv", "overlay_knn__p0.csv"]
    )
    with open(tmp_path / "recall.csv") as fh:
        rows = list(csv.DictReader(fh))
    # 8 cells plus 3 RandomSamples runs per detector
    assert len(rows) == 8 + 2 * 3
    assert sum(r["run"] in ("all", "mean") for r in rows) == 8
    with open(tmp_path / "normal_to_abnormal_ratio.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    with open(tmp_path / "overlay_knn__p0.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["timestamp", "cgm", "verdict", "truth", "adversarial_cgm", "adversarial_verdict"]
    assert len(rows) == len(overlay)


def test_overlay_of_hundred_windows():
    cgm = np.random.default_rng(0).uniform(70, 120, 108)  # 100 windows for history 6, horizon 3
    tr = make_trace(cgm, split=Split.TEST)
    w = np.zeros((6, 4))
    w[-1, 0] = 1.0
    model = LinearForecaster(w, 0.0)
    rec = attack_trace(model, tr, horizon=3, max_iters=20)
    det = fit_knn(np.random.default_rng(1).normal(100, 10, (20, 6, 4)), np.full((3, 6, 4), 250.0), KnnParams(k=3))
    rows = overlay_rows(det, tr, rec, 6, 3)
    assert len(rows) == 100
    assert {r[3] for r in rows} <= {"benign", "malicious"}
    assert all((r[4] == "") == (r[3] == "benign") for r in rows)
