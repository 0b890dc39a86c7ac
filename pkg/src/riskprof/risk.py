"""Instantaneous risk and per-patient risk profiles.

``R_t = S * Z_t`` where ``Z_t = (y_t - f(x_t))**2`` is the squared gap between
the benign and adversarial forecasts and ``S`` weights the diagnostic
transition the attack caused.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attack import AttackRecords, AttackStatus
from .data import (
    DEFAULT_THRESHOLDS,
    DiagnosticState,
    PatientTrace,
    Thresholds,
    classify_states,
    windowize,
)
from .predictor import Forecaster

H, N, L = DiagnosticState.HYPER, DiagnosticState.NORMAL, DiagnosticState.HYPO

DEFAULT_TRANSITIONS: dict[tuple[DiagnosticState, DiagnosticState], float] = {
    (L, H): 64.0,
    (N, H): 32.0,
    (L, N): 16.0,
    (H, L): 8.0,
    (H, N): 4.0,
    (N, L): 2.0,
}
DEFAULT_SAME_STATE = 1.0


def _key(benign: DiagnosticState, adversarial: DiagnosticState) -> str:
    return f"{benign.label}->{adversarial.label}"


@dataclass(frozen=True)
class SeverityTable:
    """Severity coefficient for each (benign, adversarial) state pair.

    Same-state pairs fall back to ``same_state`` unless given explicitly.
    """

    transitions: Mapping[tuple[DiagnosticState, DiagnosticState], float] = field(
        default_factory=lambda: dict(DEFAULT_TRANSITIONS)
    )
    same_state: float = DEFAULT_SAME_STATE
    _matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        m = np.full((3, 3), float(self.same_state))
        for (b, a), s in self.transitions.items():
            m[DiagnosticState(b), DiagnosticState(a)] = float(s)
        if not np.all(np.isfinite(m)) or np.any(m <= 0):
            raise ValueError("severity coefficients must be finite and > 0")
        m.setflags(write=False)
        object.__setattr__(self, "_matrix", m)

    @property
    def matrix(self) -> np.ndarray:
        """3x3 array indexed ``[benign, adversarial]`` by state code."""
        return self._matrix

    def __getitem__(self, pair: tuple[DiagnosticState, DiagnosticState]) -> float:
        return float(self._matrix[pair[0], pair[1]])

    def to_dict(self) -> dict[str, float]:
        return {
            _key(b, a): float(self._matrix[b, a]) for b in DiagnosticState for a in DiagnosticState
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, float], same_state: float = DEFAULT_SAME_STATE) -> "SeverityTable":
        """Build from ``{"Hypo->Hyper": 64, ...}``; missing pairs keep their defaults."""
        trans = dict(DEFAULT_TRANSITIONS)
        for key, value in d.items():
            try:
                b, a = (DiagnosticState.parse(s.strip()) for s in key.split("->"))
            except (ValueError, KeyError):
                raise ValueError(f"bad severity key {key!r}; expected 'State->State'") from None
            trans[(b, a)] = float(value)
        return cls(trans, same_state)


DEFAULT_SEVERITY = SeverityTable()


def magnitude(y_t: float, f_xt: float) -> float:
    if not (math.isfinite(y_t) and math.isfinite(f_xt)):
        raise ValueError("predictions must be finite")
    return (y_t - f_xt) ** 2


def severity(table: SeverityTable, benign: DiagnosticState, adversarial: DiagnosticState) -> float:
    return table[(benign, adversarial)]


def instantaneous_risk(
    table: SeverityTable,
    y_t: float,
    f_xt: float,
    benign_state: DiagnosticState,
    adversarial_state: DiagnosticState,
) -> float:
    return severity(table, benign_state, adversarial_state) * magnitude(y_t, f_xt)


def risk_values(
    table: SeverityTable,
    benign: np.ndarray,
    adversarial: np.ndarray,
    benign_state: np.ndarray,
    adversarial_state: np.ndarray,
) -> np.ndarray:
    """Vectorised ``instantaneous_risk`` over aligned arrays."""
    benign = np.asarray(benign, dtype=float)
    adversarial = np.asarray(adversarial, dtype=float)
    s = table.matrix[np.asarray(benign_state, dtype=int), np.asarray(adversarial_state, dtype=int)]
    return s * (benign - adversarial) ** 2


@dataclass(frozen=True, eq=False)
class RiskProfile:
    patient_id: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        if ts.shape != vals.shape or ts.ndim != 1:
            raise ValueError("timestamps and values must be aligned 1-D arrays")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("profile timestamps must be strictly increasing")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("risk values must be finite and non-negative")
        for a in (ts, vals):
            a.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return int(self.values.size)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "risk"])
            for t, r in zip(self.timestamps.tolist(), self.values.tolist()):
                w.writerow([t, repr(r)])

    @classmethod
    def read_csv(cls, path: str | Path, patient_id: str | None = None) -> "RiskProfile":
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            patient_id=patient_id if patient_id is not None else path.stem,
            timestamps=np.array([int(r["timestamp"]) for r in rows], dtype=np.int64),
            values=np.array([float(r["risk"]) for r in rows], dtype=float),
        )


def build_risk_profile(
    traces: Sequence[PatientTrace],
    model: Forecaster,
    records: AttackRecords,
    table: SeverityTable = DEFAULT_SEVERITY,
    horizon: int = 6,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
) -> RiskProfile:
    """Risk profile of one patient from its evaluated windows and attack records.

    Both forecasts are recomputed from the windows, so the profile depends on
    the records only through the adversarial cgm values. Skipped windows get
    zero risk.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("no traces given")
    pids = {t.patient_id for t in traces}
    if len(pids) != 1:
        raise ValueError(f"traces span several patients: {sorted(pids)}")
    (pid,) = pids

    feats, ts, pp = [], [], []
    for tr in sorted(traces, key=lambda t: int(t.timestamps[0])):
        try:
            w = windowize(tr, model.history_len, horizon, thresholds)
        except ValueError:
            continue
        feats.append(w.features)
        ts.append(w.timestamps)
        pp.append(w.postprandial)
    if not feats:
        raise ValueError(f"patient {pid}: no evaluable windows")
    X = np.concatenate(feats)
    ts = np.concatenate(ts)
    pp = np.concatenate(pp)

    splits = sorted({t.split.value for t in traces})
    mine = (records.patient_id == pid) & np.isin(records.split, splits)
    if not mine.any():
        raise ValueError(f"no attack records for patient {pid}")
    recs = records.select(mine)
    order = np.argsort(recs.timestamp, kind="stable")
    recs = recs.select(order)
    if recs.timestamp.shape != ts.shape or np.any(recs.timestamp != ts):
        raise ValueError(
            f"patient {pid}: attack records ({len(recs)} windows) do not match "
            f"the trace windows ({ts.size})"
        )

    benign = model.predict_batch(X)
    adv_X = X.copy()
    adv_X[:, :, 0] = recs.adversarial_cgm
    adversarial = model.predict_batch(adv_X)
    skipped = recs.status == AttackStatus.SKIPPED
    adversarial = np.where(skipped, benign, adversarial)
    bstate = classify_states(benign, pp, thresholds)
    astate = classify_states(adversarial, pp, thresholds)
    return RiskProfile(pid, ts, risk_values(table, benign, adversarial, bstate, astate))
