"""Detection metrics, the strategy x detector experiment matrix and its report.

Malicious is the positive class. A ratio with a zero denominator is
*undefined* (``None``) and is written out as ``"undefined"``; it is never
silently turned into 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attack import AttackRecords
from .cluster import VulnerabilityClusters
from .data import DEFAULT_THRESHOLDS, UNBOUNDED, PatientTrace, Split, Thresholds, normal_to_abnormal_ratio, windowize
from .detect import (
    Detector,
    KnnParams,
    LabeledWindows,
    OcsvmParams,
    StrategyKind,
    TrainingStrategy,
    Verdict,
    fit_knn,
    fit_ocsvm,
    labeled_windows,
    select_training_set,
)

UNDEFINED = "undefined"
DETECTORS = ("knn", "ocsvm")
METRICS = ("recall", "precision", "f1")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def tally(verdicts: np.ndarray, labels: np.ndarray) -> ConfusionCounts:
    v = np.asarray(verdicts) == Verdict.MALICIOUS
    y = np.asarray(labels) == Verdict.MALICIOUS
    if v.shape != y.shape:
        raise ValueError("verdicts and labels must align")
    return ConfusionCounts(int((v & y).sum()), int((v & ~y).sum()), int((~v & ~y).sum()), int((~v & y).sum()))


def confusion(detector: Detector, data: LabeledWindows) -> ConfusionCounts:
    if len(data) == 0:
        raise ValueError("empty test set")
    return tally(detector.verdict_batch(data.windows), data.labels)


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


@dataclass(frozen=True)
class Metrics:
    recall: float | None
    precision: float | None
    f1: float | None

    def get(self, name: str) -> float | None:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {m: (UNDEFINED if self.get(m) is None else self.get(m)) for m in METRICS}


def f1_score(recall: float | None, precision: float | None) -> float | None:
    """Harmonic mean; undefined if either input is, 0 when both are 0."""
    if recall is None or precision is None:
        return None
    if recall + precision == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def metrics(c: ConfusionCounts) -> Metrics:
    r = _ratio(c.tp, c.tp + c.fn)
    p = _ratio(c.tp, c.tp + c.fp)
    return Metrics(r, p, f1_score(r, p))


def mean_metrics(runs: Sequence[Metrics]) -> Metrics:
    """Arithmetic mean per metric over the runs where it is defined.

    ``math.fsum`` is exactly rounded, so the result does not depend on run order.
    """

    def avg(name: str) -> float | None:
        vals = [m.get(name) for m in runs if m.get(name) is not None]
        return math.fsum(vals) / len(vals) if vals else None

    return Metrics(avg("recall"), avg("precision"), avg("f1"))


# ---------------------------------------------------------------------------
# Experiment


@dataclass(frozen=True)
class ExperimentConfig:
    detectors: tuple[str, ...] = DETECTORS
    strategies: tuple[str, ...] = tuple(k.value for k in StrategyKind)
    knn: KnnParams = KnnParams()
    ocsvm: OcsvmParams = OcsvmParams()
    random_runs: int = 10
    random_cohort_size: int = 3
    # one stride for every detector, or a per-detector mapping
    train_stride: int | Mapping[str, int] = 1
    history_len: int = 12
    horizon: int = 6

    def __post_init__(self) -> None:
        for d in self.detectors:
            if d not in DETECTORS:
                raise ValueError(f"unknown detector {d!r}")
        for s in self.strategies:
            StrategyKind(s)
        if isinstance(self.train_stride, Mapping):
            unknown = set(self.train_stride) - set(DETECTORS)
            if unknown:
                raise ValueError(f"train_stride names unknown detectors {sorted(unknown)}")
        for d in DETECTORS:
            s = self.stride_for(d)
            if not isinstance(s, int) or s < 1:
                raise ValueError(f"train_stride for {d} must be an integer >= 1")

    def stride_for(self, detector: str) -> int:
        if isinstance(self.train_stride, Mapping):
            return self.train_stride.get(detector, 1)
        return self.train_stride

    def strategy(self, name: str) -> TrainingStrategy:
        return TrainingStrategy(StrategyKind(name), self.random_runs, self.random_cohort_size)


@dataclass(frozen=True)
class RunResult:
    """One fitted detector evaluated on the common test pool."""

    cohort: tuple[str, ...]
    n_benign: int
    n_malicious: int
    counts: ConfusionCounts
    per_patient: dict[str, ConfusionCounts] = field(default_factory=dict)

    @property
    def metrics(self) -> Metrics:
        return metrics(self.counts)

    def to_dict(self) -> dict:
        return {
            "cohort": list(self.cohort),
            "train_benign": self.n_benign,
            "train_malicious": self.n_malicious,
            "counts": self.counts.to_dict(),
            "metrics": self.metrics.to_dict(),
            "per_patient": {
                pid: {"counts": c.to_dict(), "metrics": metrics(c).to_dict()}
                for pid, c in sorted(self.per_patient.items())
            },
        }


@dataclass(frozen=True)
class CellResult:
    detector: str
    strategy: str
    runs: tuple[RunResult, ...]

    @property
    def metrics(self) -> Metrics:
        if len(self.runs) == 1:
            return self.runs[0].metrics
        return mean_metrics([r.metrics for r in self.runs])

    def spread(self, name: str) -> tuple[float, float] | None:
        vals = [r.metrics.get(name) for r in self.runs if r.metrics.get(name) is not None]
        return (min(vals), max(vals)) if vals else None

    def to_dict(self) -> dict:
        d = {
            "detector": self.detector,
            "strategy": self.strategy,
            "metrics": self.metrics.to_dict(),
            "runs": [r.to_dict() for r in self.runs],
        }
        if len(self.runs) > 1:
            d["spread"] = {
                m: (UNDEFINED if self.spread(m) is None else list(self.spread(m))) for m in METRICS
            }
        return d


@dataclass(frozen=True)
class ExperimentReport:
    cells: tuple[CellResult, ...]
    test_pool: dict
    seeds: dict
    provenance: dict

    def cell(self, detector: str, strategy: str) -> CellResult:
        for c in self.cells:
            if c.detector == detector and c.strategy == strategy:
                return c
        raise KeyError((detector, strategy))

    def to_dict(self) -> dict:
        return {
            "cells": [c.to_dict() for c in self.cells],
            "test_pool": self.test_pool,
            "seeds": self.seeds,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        def fmt(v: float | None) -> str:
            return UNDEFINED if v is None else f"{100 * v:.1f}"

        lines = [
            "# Detection results",
            "",
            f"Test pool: {self.test_pool['benign']} benign, {self.test_pool['malicious']} malicious windows "
            f"from {len(self.test_pool['patients'])} patients.",
            "",
            "| detector | strategy | recall % | precision % | F1 % | training cohort |",
            "|---|---|---|---|---|---|",
        ]
        for c in self.cells:
            m = c.metrics
            cohort = (
                f"{len(c.runs)} runs of {len(c.runs[0].cohort)}"
                if len(c.runs) > 1
                else ", ".join(c.runs[0].cohort)
            )
            lines.append(
                f"| {c.detector} | {c.strategy} | {fmt(m.recall)} | {fmt(m.precision)} | {fmt(m.f1)} | {cohort} |"
            )
        strategies = {c.strategy for c in self.cells}
        if {"LessVulnerable", "AllPatients"} <= strategies:
            lines += ["", "Change from AllPatients to LessVulnerable (percentage points):", ""]
            for det in sorted({c.detector for c in self.cells}):
                less, full = self.cell(det, "LessVulnerable").metrics, self.cell(det, "AllPatients").metrics
                parts = []
                for name in METRICS:
                    a, b = less.get(name), full.get(name)
                    parts.append(f"{name} {UNDEFINED if a is None or b is None else f'{100 * (a - b):+.1f}'}")
                lines.append(f"- {det}: " + ", ".join(parts))
        return "\n".join(lines) + "\n"


def fit_detector(kind: str, data: LabeledWindows, config: ExperimentConfig) -> Detector:
    if kind == "knn":
        return fit_knn(data.benign, data.malicious, config.knn)
    if kind == "ocsvm":
        return fit_ocsvm(data.benign, config.ocsvm)
    raise ValueError(f"unknown detector {kind!r}")


def build_test_pool(
    traces: Sequence[PatientTrace], records: AttackRecords, config: ExperimentConfig,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
) -> LabeledWindows:
    tests = [t for t in traces if t.split is Split.TEST]
    if not tests:
        raise ValueError("no Test-split traces for the test pool")
    return labeled_windows(tests, records, config.history_len, config.horizon, 1, thresholds)


def evaluate_detector(detector: Detector, pool: LabeledWindows) -> tuple[ConfusionCounts, dict[str, ConfusionCounts], np.ndarray]:
    v = detector.verdict_batch(pool.windows)
    per = {
        pid: tally(v[pool.patient_id == pid], pool.labels[pool.patient_id == pid])
        for pid in sorted(set(pool.patient_id.tolist()))
    }
    return tally(v, pool.labels), per, v


def training_cohorts(
    config: ExperimentConfig,
    clusters: VulnerabilityClusters,
    traces: Sequence[PatientTrace],
    seed: int,
) -> dict[str, list[list[PatientTrace]]]:
    return {s: select_training_set(config.strategy(s), clusters, traces, seed) for s in config.strategies}


def run_experiment(
    traces: Sequence[PatientTrace],
    records: AttackRecords,
    clusters: VulnerabilityClusters,
    config: ExperimentConfig = ExperimentConfig(),
    seed: int = 0,
    provenance: Mapping | None = None,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
) -> ExperimentReport:
    """Fit every detector under every strategy and score all of them on one test pool."""
    pool = build_test_pool(traces, records, config, thresholds)
    cells = []
    for strategy, cohorts in training_cohorts(config, clusters, traces, seed).items():
        for det in config.detectors:
            runs = []
            for cohort in cohorts:
                data = labeled_windows(
                    cohort, records, config.history_len, config.horizon, config.stride_for(det), thresholds
                )
                model = fit_detector(det, data, config)
                counts, per, _ = evaluate_detector(model, pool)
                runs.append(run_result(cohort, data, counts, per))
            cells.append(CellResult(det, strategy, tuple(runs)))
    return ExperimentReport(tuple(cells), pool_summary(pool), {"strategy_seed": seed}, dict(provenance or {}))


def run_result(cohort: Sequence[PatientTrace], data: LabeledWindows, counts, per) -> RunResult:
    ids = tuple(sorted({t.patient_id for t in cohort}))
    n_mal = int(data.labels.sum())
    return RunResult(ids, len(data) - n_mal, n_mal, counts, per)


def pool_summary(pool: LabeledWindows) -> dict:
    n_mal = int(pool.labels.sum())
    return {
        "benign": len(pool) - n_mal,
        "malicious": n_mal,
        "patients": sorted(set(pool.patient_id.tolist())),
    }


# ---------------------------------------------------------------------------
# Plot data


def _fmt(v) -> str:
    if v is None:
        return UNDEFINED
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def metric_rows(report: ExperimentReport, name: str) -> list[tuple]:
    """One row per (detector, strategy) plus one per RandomSamples-style run."""
    rows = []
    for c in report.cells:
        rows.append((c.detector, c.strategy, "mean" if len(c.runs) > 1 else "all", c.metrics.get(name)))
        if len(c.runs) > 1:
            for i, r in enumerate(c.runs):
                rows.append((c.detector, c.strategy, f"run{i}", r.metrics.get(name)))
    return rows


def ratio_rows(traces: Sequence[PatientTrace], thresholds: Thresholds = DEFAULT_THRESHOLDS) -> list[tuple]:
    rows = []
    by_pid: dict[str, list[PatientTrace]] = {}
    for t in traces:
        by_pid.setdefault(t.patient_id, []).append(t)
    for pid in sorted(by_pid):
        r = normal_to_abnormal_ratio(by_pid[pid], thresholds)
        rows.append((pid, by_pid[pid][0].subset.value, "inf" if r is UNBOUNDED else r))
    return rows


def overlay_rows(
    detector: Detector,
    trace: PatientTrace,
    records: AttackRecords,
    history_len: int,
    horizon: int,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
) -> list[tuple]:
    """One row per window: its cgm, any successful adversarial cgm, and both verdicts."""
    w = windowize(trace, history_len, horizon, thresholds)
    rec = records.for_patient(trace.patient_id, trace.split.value)
    pos = {int(t): i for i, t in enumerate(rec.timestamp)}
    idx = np.array([pos[int(t)] for t in w.timestamps], dtype=np.int64)
    success = rec.status[idx] == 2
    adv = w.features.copy()
    adv[:, :, 0] = rec.adversarial_cgm[idx]
    v_benign = detector.verdict_batch(w.features)
    v_adv = detector.verdict_batch(adv[success]) if success.any() else np.zeros(0, np.int8)
    adv_verdict = np.full(len(w), -1)
    adv_verdict[success] = v_adv
    rows = []
    for i in range(len(w)):
        rows.append((
            int(w.timestamps[i]),
            float(w.features[i, -1, 0]),
            Verdict(int(v_benign[i])).name.lower(),
            "malicious" if success[i] else "benign",
            float(adv[i, -1, 0]) if success[i] else "",
            Verdict(int(adv_verdict[i])).name.lower() if success[i] else "",
        ))
    return rows


OVERLAY_HEADER = ("timestamp", "cgm", "verdict", "truth", "adversarial_cgm", "adversarial_verdict")


def emit_plot_data(
    report: ExperimentReport,
    out_dir: str | Path,
    traces: Sequence[PatientTrace] = (),
    overlays: Mapping[str, Sequence[tuple]] | None = None,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
) -> list[Path]:
    """Write one CSV per figure-like view and return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in METRICS:
        p = out / f"{name}.csv"
        _write_rows(p, ("detector", "strategy", "run", name), metric_rows(report, name))
        written.append(p)
    per = []
    for c in report.cells:
        for i, r in enumerate(c.runs):
            run = "all" if len(c.runs) == 1 else f"run{i}"
            for pid, cc in sorted(r.per_patient.items()):
                m = metrics(cc)
                per.append((c.detector, c.strategy, run, pid, m.recall, m.precision, m.f1))
    p = out / "per_patient.csv"
    _write_rows(p, ("detector", "strategy", "run", "patient_id", "recall", "precision", "f1"), per)
    written.append(p)
    if traces:
        p = out / "normal_to_abnormal_ratio.csv"
        _write_rows(p, ("patient_id", "subset", "ratio"), ratio_rows(traces, thresholds))
        written.append(p)
    for key, rows in sorted((overlays or {}).items()):
        p = out / f"overlay_{key}.csv"
        _write_rows(p, OVERLAY_HEADER, rows)
        written.append(p)
    return written
