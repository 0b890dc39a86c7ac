"""Constrained evasion attack on the glucose forecaster.

The attacker rewrites only the cgm column of a window. Each iteration moves
the cgm entry with the largest positive sensitivity up by ``step`` and
projects it into ``[cgm_low, cgm_high]``; a move is kept only if the forecast
rises, otherwise the next most sensitive entry is tried. The attack stops as
soon as the forecast is hyperglycaemic, when no entry can raise it any more,
or after ``max_iters`` accepted moves.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import (
    CGM_MAX,
    DEFAULT_THRESHOLDS,
    DiagnosticState,
    MealContext,
    PatientTrace,
    Split,
    Thresholds,
    classify_states,
    windowize,
)
from .predictor import Forecaster


class AttackStatus(enum.IntEnum):
    SKIPPED = 0  # benign forecast already hyper: nothing to attack
    FAILURE = 1
    SUCCESS = 2


@dataclass(frozen=True)
class AttackConstraints:
    context: MealContext
    cgm_low: float
    cgm_high: float = CGM_MAX
    max_iters: int = 200
    step: float = 5.0

    def __post_init__(self) -> None:
        if not 0 <= self.cgm_low <= self.cgm_high <= CGM_MAX:
            raise ValueError(f"bad cgm bounds [{self.cgm_low}, {self.cgm_high}]")
        if self.step <= 0 or self.max_iters < 0:
            raise ValueError("step must be > 0 and max_iters >= 0")

    @classmethod
    def for_context(
        cls, context: MealContext, thresholds: Thresholds = DEFAULT_THRESHOLDS, **kwargs
    ) -> "AttackConstraints":
        """Lower bound is the hyper threshold of the context (125 fasting, 180 postprandial)."""
        return cls(context=context, cgm_low=thresholds.hyper_for(context), **kwargs)


@dataclass(frozen=True, eq=False)
class AttackOutcome:
    status: AttackStatus
    adversarial_window: np.ndarray
    benign_prediction: float
    adversarial_prediction: float
    benign_state: DiagnosticState
    adversarial_state: DiagnosticState
    iterations_used: int
    trajectory: tuple[float, ...] = ()

    @property
    def success(self) -> bool:
        return self.status is AttackStatus.SUCCESS

    @property
    def skipped(self) -> bool:
        return self.status is AttackStatus.SKIPPED


@dataclass(frozen=True, eq=False)
class BatchResult:
    status: np.ndarray
    adversarial_cgm: np.ndarray
    benign_prediction: np.ndarray
    adversarial_prediction: np.ndarray
    benign_state: np.ndarray
    adversarial_state: np.ndarray
    iterations: np.ndarray
    trajectories: list[list[float]] | None = None


def craft_batch(
    model: Forecaster,
    windows: np.ndarray,
    postprandial: np.ndarray,
    *,
    step: float = 5.0,
    max_iters: int = 200,
    cgm_low: np.ndarray | None = None,
    cgm_high: float = CGM_MAX,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
    record: bool = False,
) -> BatchResult:
    """Run the greedy attack on every window at once.

    ``cgm_low`` defaults to the per-window hyper threshold of its meal context.
    """
    X = np.array(windows, dtype=float, copy=True)
    n, h = X.shape[0], X.shape[1]
    postprandial = np.asarray(postprandial, dtype=bool)
    threshold = np.where(postprandial, thresholds.postprandial_hyper, thresholds.fasting_hyper)
    low = threshold if cgm_low is None else np.broadcast_to(np.asarray(cgm_low, dtype=float), (n,))

    benign = model.predict_batch(X) if n else np.zeros(0)
    bstate = classify_states(benign, postprandial, thresholds)
    skipped = bstate == DiagnosticState.HYPER
    pred = benign.copy()
    iters = np.zeros(n, dtype=np.int64)
    active = ~skipped
    traj = [[float(p)] for p in benign] if record else None

    for _ in range(max_iters):
        active &= ~(pred > threshold)
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        g = model.gradient_batch(X[idx])
        cgm = X[idx, :, 0]
        movable = (g > 0) & (cgm < cgm_high)
        key = np.where(movable, -g, np.inf)
        order = np.argsort(key, axis=1, kind="stable")  # ties -> earliest timestep
        pending = np.ones(idx.size, dtype=bool)
        accepted = np.zeros(idx.size, dtype=bool)
        rows = np.arange(idx.size)
        for r in range(h):
            cand = order[:, r]
            # candidates are sorted movable-first, so an immovable one ends the search
            ok = pending & movable[rows, cand]
            pending = ok
            if not ok.any():
                break
            sub = np.flatnonzero(ok)
            trial = X[idx[sub]]
            c = cand[sub]
            k = np.arange(sub.size)
            trial[k, c, 0] = np.clip(trial[k, c, 0] + step, low[idx[sub]], cgm_high)
            p = model.predict_batch(trial)
            good = p > pred[idx[sub]]
            won = idx[sub[good]]
            X[won] = trial[good]
            pred[won] = p[good]
            iters[won] += 1
            pending[sub[good]] = False
            accepted[sub[good]] = True
            if record:
                for w, v in zip(won, p[good]):
                    traj[w].append(float(v))
        active[idx[~accepted]] = False

    astate = classify_states(pred, postprandial, thresholds)
    status = np.where(
        skipped,
        AttackStatus.SKIPPED,
        np.where(astate == DiagnosticState.HYPER, AttackStatus.SUCCESS, AttackStatus.FAILURE),
    ).astype(np.int8)
    return BatchResult(status, X[:, :, 0].copy(), benign, pred, bstate, astate, iters, traj)


def craft_adversarial(
    model: Forecaster,
    window: np.ndarray,
    context: MealContext,
    constraints: AttackConstraints | None = None,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
) -> AttackOutcome:
    if constraints is None:
        constraints = AttackConstraints.for_context(context, thresholds)
    window = np.asarray(window, dtype=float)
    res = craft_batch(
        model,
        window[None],
        np.array([context is MealContext.POSTPRANDIAL]),
        step=constraints.step,
        max_iters=constraints.max_iters,
        cgm_low=np.array([constraints.cgm_low]),
        cgm_high=constraints.cgm_high,
        thresholds=thresholds,
        record=True,
    )
    adv = window.copy()
    adv[:, 0] = res.adversarial_cgm[0]
    return AttackOutcome(
        status=AttackStatus(int(res.status[0])),
        adversarial_window=adv,
        benign_prediction=float(res.benign_prediction[0]),
        adversarial_prediction=float(res.adversarial_prediction[0]),
        benign_state=DiagnosticState(int(res.benign_state[0])),
        adversarial_state=DiagnosticState(int(res.adversarial_state[0])),
        iterations_used=int(res.iterations[0]),
        trajectory=tuple(res.trajectories[0]),
    )


# ---------------------------------------------------------------------------
# Per-window records across traces


@dataclass(frozen=True, eq=False)
class AttackRecords:
    """Column-oriented attack results, one row per window, in timestamp order per patient."""

    patient_id: np.ndarray
    split: np.ndarray
    timestamp: np.ndarray
    postprandial: np.ndarray
    status: np.ndarray
    benign_prediction: np.ndarray
    adversarial_prediction: np.ndarray
    benign_state: np.ndarray
    adversarial_state: np.ndarray
    iterations: np.ndarray
    adversarial_cgm: np.ndarray

    def __len__(self) -> int:
        return int(self.timestamp.size)

    def select(self, mask) -> "AttackRecords":
        return AttackRecords(**{k: v[mask] for k, v in self.__dict__.items()})

    def for_patient(self, patient_id: str, split: str | None = None) -> "AttackRecords":
        m = self.patient_id == patient_id
        if split is not None:
            m &= self.split == split
        return self.select(m)

    @classmethod
    def concat(cls, parts: Sequence["AttackRecords"]) -> "AttackRecords":
        keys = cls.__dataclass_fields__.keys()
        return cls(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in keys})

    def iter_json(self) -> Iterable[dict]:
        for i in range(len(self)):
            yield {
                "patient_id": str(self.patient_id[i]),
                "split": str(self.split[i]),
                "timestamp": int(self.timestamp[i]),
                "context": "postprandial" if self.postprandial[i] else "fasting",
                "status": AttackStatus(int(self.status[i])).name.lower(),
                "benign_prediction": float(self.benign_prediction[i]),
                "adversarial_prediction": float(self.adversarial_prediction[i]),
                "benign_state": DiagnosticState(int(self.benign_state[i])).label,
                "adversarial_state": DiagnosticState(int(self.adversarial_state[i])).label,
                "iterations_used": int(self.iterations[i]),
                "adversarial_cgm": self.adversarial_cgm[i].tolist(),
            }

    def write_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for rec in self.iter_json():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "AttackRecords":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        return cls.from_rows(rows)

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "AttackRecords":
        def col(name, dtype=None):
            return np.array([r[name] for r in rows], dtype=dtype)

        n = len(rows)
        h = len(rows[0]["adversarial_cgm"]) if rows else 0
        return cls(
            patient_id=col("patient_id", object).astype(str) if n else np.zeros(0, dtype=str),
            split=col("split", object).astype(str) if n else np.zeros(0, dtype=str),
            timestamp=col("timestamp", np.int64),
            postprandial=np.array([r["context"] == "postprandial" for r in rows], dtype=bool),
            status=np.array([AttackStatus[r["status"].upper()] for r in rows], dtype=np.int8),
            benign_prediction=col("benign_prediction", float),
            adversarial_prediction=col("adversarial_prediction", float),
            benign_state=np.array([DiagnosticState.parse(r["benign_state"]) for r in rows], dtype=np.int8),
            adversarial_state=np.array(
                [DiagnosticState.parse(r["adversarial_state"]) for r in rows], dtype=np.int8
            ),
            iterations=col("iterations_used", np.int64),
            adversarial_cgm=col("adversarial_cgm", float).reshape(n, h),
        )


def attack_trace(
    model: Forecaster,
    trace: PatientTrace,
    *,
    horizon: int = 6,
    step: float = 5.0,
    max_iters: int = 200,
    cgm_high: float = CGM_MAX,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
) -> AttackRecords:
    w = windowize(trace, model.history_len, horizon, thresholds)
    res = craft_batch(
        model, w.features, w.postprandial, step=step, max_iters=max_iters,
        cgm_high=cgm_high, thresholds=thresholds,
    )
    n = len(w)
    return AttackRecords(
        patient_id=np.full(n, trace.patient_id),
        split=np.full(n, trace.split.value),
        timestamp=w.timestamps,
        postprandial=w.postprandial,
        status=res.status,
        benign_prediction=res.benign_prediction,
        adversarial_prediction=res.adversarial_prediction,
        benign_state=res.benign_state,
        adversarial_state=res.adversarial_state,
        iterations=res.iterations,
        adversarial_cgm=res.adversarial_cgm,
    )


# ---------------------------------------------------------------------------
# Success rates


@dataclass(frozen=True)
class RateCell:
    attackable: int
    successes: int

    @property
    def rate(self) -> float | None:
        """Percentage, or None for an empty cell."""
        if self.attackable == 0:
            return None
        return 100.0 * self.successes / self.attackable


CELL_STATES = ("normal", "hypo", "all")
CELL_CONTEXTS = ("fasting", "postprandial", "all")


@dataclass(frozen=True)
class SuccessRates:
    cells: dict[str, dict[tuple[str, str], RateCell]] = field(default_factory=dict)

    def rate(self, patient_id: str, state: str = "all", context: str = "all") -> float | None:
        return self.cells[patient_id][(state, context)].rate

    def overall(self, state: str = "all", context: str = "all") -> dict[str, float | None]:
        return {pid: self.rate(pid, state, context) for pid in self.cells}

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "benign_state", "context", "attackable", "successes", "success_rate"])
            for pid, cells in self.cells.items():
                for (state, ctx), cell in cells.items():
                    rate = "" if cell.rate is None else f"{cell.rate:.4f}"
                    w.writerow([pid, state, ctx, cell.attackable, cell.successes, rate])

    @classmethod
    def read_csv(cls, path: str | Path) -> "SuccessRates":
        cells: dict[str, dict[tuple[str, str], RateCell]] = {}
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                cells.setdefault(row["patient_id"], {})[(row["benign_state"], row["context"])] = RateCell(
                    int(row["attackable"]), int(row["successes"])
                )
        return cls(cells)


def success_rates(records: AttackRecords, context_filter: MealContext | None = None) -> SuccessRates:
    """Success percentage per patient, split by benign state and meal context."""
    cells: dict[str, dict[tuple[str, str], RateCell]] = {}
    for pid in sorted(set(records.patient_id.tolist())):
        r = records.for_patient(pid)
        attackable = r.status != AttackStatus.SKIPPED
        success = r.status == AttackStatus.SUCCESS
        by_state = {
            "normal": r.benign_state == DiagnosticState.NORMAL,
            "hypo": r.benign_state == DiagnosticState.HYPO,
            "all": np.ones(len(r), dtype=bool),
        }
        by_ctx = {
            "fasting": ~r.postprandial,
            "postprandial": r.postprandial,
            "all": np.ones(len(r), dtype=bool),
        }
        if context_filter is not None:
            keep = by_ctx[context_filter.value]
            by_ctx = {context_filter.value: keep}
        pc = {}
        for s in CELL_STATES:
            for c, cm in by_ctx.items():
                m = attackable & by_state[s] & cm
                pc[(s, c)] = RateCell(int(m.sum()), int((success & m).sum()))
        cells[pid] = pc
    return SuccessRates(cells)


def attack_success_rates(
    model: Forecaster,
    traces: Sequence[PatientTrace],
    context_filter: MealContext | None = None,
    **attack_kwargs,
) -> SuccessRates:
    tests = [t for t in traces if t.split is Split.TEST]
    if not tests:
        raise ValueError("no Test-split traces to attack")
    recs = AttackRecords.concat([attack_trace(model, t, **attack_kwargs) for t in tests])
    return success_rates(recs, context_filter)
