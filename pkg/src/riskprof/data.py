"""Glucose traces, diagnostic states and trace ingestion.

A trace is stored column-wise (numpy arrays) rather than as a list of
sample objects; :class:`GlucoseSample` is only materialised on demand.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CGM_MAX = 499.0
DEFAULT_CADENCE = 300
POSTPRANDIAL_WINDOW_S = 7200
CORE_COLUMNS = ("timestamp", "cgm", "basal", "bolus", "carbs")
FEATURES = ("cgm", "basal", "bolus", "carbs")


class TraceError(ValueError):
    """Raised when a trace file or trace content violates the schema."""

    def __init__(self, message: str, row: int | None = None, path: str | None = None):
        self.row = row
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}: "
        if row is not None:
            where += f"row {row}: "
        super().__init__(where + message)


class DiagnosticState(enum.IntEnum):
    HYPO = 0
    NORMAL = 1
    HYPER = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str | int | "DiagnosticState") -> "DiagnosticState":
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(value)


class MealContext(enum.Enum):
    FASTING = "fasting"
    POSTPRANDIAL = "postprandial"


class Subset(enum.Enum):
    A = "A"
    B = "B"
    SYNTHETIC = "Synthetic"


class Split(enum.Enum):
    TRAIN = "Train"
    TEST = "Test"


@dataclass(frozen=True)
class Thresholds:
    """Glucose thresholds in mg/dL.

    ``hypo`` is the clinical level-1 hypoglycaemia bound; the hyper bounds
    differ between fasting and postprandial context.
    """

    hypo: float = 70.0
    fasting_hyper: float = 125.0
    postprandial_hyper: float = 180.0
    postprandial_window_s: int = POSTPRANDIAL_WINDOW_S

    def hyper_for(self, context: MealContext) -> float:
        if context is MealContext.POSTPRANDIAL:
            return self.postprandial_hyper
        return self.fasting_hyper


DEFAULT_THRESHOLDS = Thresholds()


@dataclass(frozen=True)
class GlucoseSample:
    timestamp: int
    cgm: float
    basal: float
    bolus: float = 0.0
    carbs: float = 0.0


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PatientTrace:
    patient_id: str
    subset: Subset
    split: Split
    timestamps: np.ndarray
    cgm: np.ndarray
    basal: np.ndarray
    bolus: np.ndarray
    carbs: np.ndarray
    cadence: int = DEFAULT_CADENCE
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype=np.int64)
        cols = {}
        for name in FEATURES:
            cols[name] = np.asarray(getattr(self, name), dtype=np.float64)
            if cols[name].shape != ts.shape:
                raise TraceError(f"column {name!r} has {cols[name].size} values, expected {ts.size}")
        object.__setattr__(self, "timestamps", _readonly(ts.copy()))
        for name, values in cols.items():
            object.__setattr__(self, name, _readonly(values.copy()))
        validate_columns(ts, cols["cgm"], cols["basal"], cols["bolus"], cols["carbs"])

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @property
    def samples(self) -> Iterator[GlucoseSample]:
        for i in range(len(self)):
            yield GlucoseSample(
                int(self.timestamps[i]),
                float(self.cgm[i]),
                float(self.basal[i]),
                float(self.bolus[i]),
                float(self.carbs[i]),
            )

    @property
    def gaps(self) -> np.ndarray:
        """Indices ``i`` where the step from sample ``i`` to ``i + 1`` exceeds 2x cadence."""
        return np.flatnonzero(np.diff(self.timestamps) > 2 * self.cadence)

    def feature_matrix(self) -> np.ndarray:
        return np.column_stack([self.cgm, self.basal, self.bolus, self.carbs])

    @classmethod
    def from_samples(
        cls,
        patient_id: str,
        samples: Sequence[GlucoseSample],
        subset: Subset = Subset.SYNTHETIC,
        split: Split = Split.TRAIN,
        cadence: int = DEFAULT_CADENCE,
    ) -> "PatientTrace":
        return cls(
            patient_id=patient_id,
            subset=subset,
            split=split,
            timestamps=np.array([s.timestamp for s in samples], dtype=np.int64),
            cgm=np.array([s.cgm for s in samples], dtype=float),
            basal=np.array([s.basal for s in samples], dtype=float),
            bolus=np.array([s.bolus for s in samples], dtype=float),
            carbs=np.array([s.carbs for s in samples], dtype=float),
            cadence=cadence,
        )


def validate_columns(ts, cgm, basal, bolus, carbs, path: str | None = None) -> None:
    """Check sample bounds and timestamp ordering; errors carry a 1-based row index."""
    for name, values, lo, hi in (
        ("cgm", cgm, 0.0, CGM_MAX),
        ("basal", basal, 0.0, math.inf),
        ("bolus", bolus, 0.0, math.inf),
        ("carbs", carbs, 0.0, math.inf),
    ):
        bad = np.flatnonzero(~np.isfinite(values) | (values < lo) | (values > hi))
        if bad.size:
            i = int(bad[0])
            raise TraceError(f"{name}={values[i]!r} outside [{lo}, {hi}]", row=i + 1, path=path)
    steps = np.diff(ts)
    bad = np.flatnonzero(steps <= 0)
    if bad.size:
        i = int(bad[0]) + 1
        raise TraceError(
            f"timestamp {int(ts[i])} not after previous {int(ts[i - 1])}", row=i + 1, path=path
        )


# ---------------------------------------------------------------------------
# Diagnostic states


def classify_state(
    glucose: float, context: MealContext, thresholds: Thresholds = DEFAULT_THRESHOLDS
) -> DiagnosticState:
    if glucose > thresholds.hyper_for(context):
        return DiagnosticState.HYPER
    if glucose < thresholds.hypo:
        return DiagnosticState.HYPO
    return DiagnosticState.NORMAL


def classify_states(
    glucose: np.ndarray, postprandial: np.ndarray, thresholds: Thresholds = DEFAULT_THRESHOLDS
) -> np.ndarray:
    """Vectorised :func:`classify_state`; returns integer state codes."""
    glucose = np.asarray(glucose, dtype=float)
    hyper_at = np.where(postprandial, thresholds.postprandial_hyper, thresholds.fasting_hyper)
    out = np.full(glucose.shape, int(DiagnosticState.NORMAL), dtype=np.int8)
    out[glucose < thresholds.hypo] = int(DiagnosticState.HYPO)
    out[glucose > hyper_at] = int(DiagnosticState.HYPER)
    return out


def postprandial_mask(
    timestamps: np.ndarray, carb_times: np.ndarray, window_s: int = POSTPRANDIAL_WINDOW_S
) -> np.ndarray:
    """True where a carb event lies in ``(t - window_s, t]``."""
    carb_times = np.sort(np.asarray(carb_times, dtype=np.int64))
    if carb_times.size == 0:
        return np.zeros(np.shape(timestamps), dtype=bool)
    idx = np.searchsorted(carb_times, timestamps, side="right") - 1
    last = np.where(idx >= 0, carb_times[np.clip(idx, 0, None)], np.iinfo(np.int64).min // 2)
    return (idx >= 0) & (last > np.asarray(timestamps) - window_s)


def trace_postprandial(trace: PatientTrace, thresholds: Thresholds = DEFAULT_THRESHOLDS) -> np.ndarray:
    return postprandial_mask(
        trace.timestamps, trace.timestamps[trace.carbs > 0], thresholds.postprandial_window_s
    )


def meal_context_at(
    trace: PatientTrace, t: int, thresholds: Thresholds = DEFAULT_THRESHOLDS
) -> MealContext:
    if len(trace) == 0 or t < trace.timestamps[0] or t > trace.timestamps[-1]:
        raise ValueError(f"t={t} outside trace span of {trace.patient_id}")
    pp = postprandial_mask(
        np.array([t]), trace.timestamps[trace.carbs > 0], thresholds.postprandial_window_s
    )
    return MealContext.POSTPRANDIAL if pp[0] else MealContext.FASTING


def trace_states(trace: PatientTrace, thresholds: Thresholds = DEFAULT_THRESHOLDS) -> np.ndarray:
    return classify_states(trace.cgm, trace_postprandial(trace, thresholds), thresholds)


class Unbounded(enum.Enum):
    """Outcome of a normal-to-abnormal ratio with no abnormal samples."""

    RATIO = "unbounded"


UNBOUNDED = Unbounded.RATIO


def normal_to_abnormal_ratio(
    trace: PatientTrace | Sequence[PatientTrace], thresholds: Thresholds = DEFAULT_THRESHOLDS
) -> float | Unbounded:
    traces = [trace] if isinstance(trace, PatientTrace) else list(trace)
    states = np.concatenate([trace_states(t, thresholds) for t in traces]) if traces else np.array([])
    if states.size == 0:
        raise ValueError("empty trace")
    normal = int(np.sum(states == DiagnosticState.NORMAL))
    abnormal = states.size - normal
    if abnormal == 0:
        return UNBOUNDED
    return normal / abnormal


# ---------------------------------------------------------------------------
# Windows


@dataclass(frozen=True, eq=False)
class Windows:
    """Feature windows cut from one trace.

    ``features`` has shape (n, history_len, 4) in FEATURES order. ``end_index``
    points at the last observed sample of each window; ``timestamps`` are the
    corresponding times. ``postprandial`` is the meal context at that time.
    """

    patient_id: str
    features: np.ndarray
    targets: np.ndarray
    end_index: np.ndarray
    timestamps: np.ndarray
    postprandial: np.ndarray

    def __len__(self) -> int:
        return int(self.targets.size)

    def take(self, idx) -> "Windows":
        return Windows(
            self.patient_id,
            self.features[idx],
            self.targets[idx],
            self.end_index[idx],
            self.timestamps[idx],
            self.postprandial[idx],
        )


def windowize(
    trace: PatientTrace,
    history_len: int = 12,
    horizon: int = 6,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
) -> Windows:
    """Cut sliding windows with the cgm target ``horizon`` steps after the last sample.

    Windows whose span (history plus the target) crosses a gap larger than
    twice the cadence are dropped.
    """
    if history_len < 1 or horizon < 1:
        raise ValueError("history_len and horizon must be >= 1")
    n = len(trace)
    count = n - history_len - horizon + 1
    if count < 1:
        raise ValueError(
            f"trace {trace.patient_id} too short: {n} samples < history {history_len} + horizon {horizon}"
        )
    span = history_len + horizon
    starts = np.arange(count)
    big_step = np.concatenate([np.diff(trace.timestamps) > 2 * trace.cadence, [False]]).astype(np.int64)
    # steps i -> i+1 for i in [start, start + span - 2]
    csum = np.concatenate([[0], np.cumsum(big_step)])
    crossing = csum[starts + span - 1] - csum[starts]
    starts = starts[crossing == 0]

    feats = trace.feature_matrix()
    idx = starts[:, None] + np.arange(history_len)[None, :]
    end = starts + history_len - 1
    pp = trace_postprandial(trace, thresholds)
    return Windows(
        patient_id=trace.patient_id,
        features=feats[idx],
        targets=trace.cgm[end + horizon].copy(),
        end_index=end,
        timestamps=trace.timestamps[end].copy(),
        postprandial=pp[end].copy(),
    )


# ---------------------------------------------------------------------------
# Ingestion and persistence


def _parse_float(text: str, column: str, row: int, path: str) -> float:
    try:
        return float(text) if text.strip() != "" else 0.0
    except ValueError:
        raise TraceError(f"cannot parse {column}={text!r}", row=row, path=path) from None


def read_trace_csv(
    path: str | Path,
    patient_id: str | None = None,
    subset: Subset = Subset.SYNTHETIC,
    split: Split = Split.TRAIN,
    cadence: int = DEFAULT_CADENCE,
) -> PatientTrace:
    path = Path(path)
    spath = str(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TraceError("empty file", path=spath) from None
        if tuple(header[: len(CORE_COLUMNS)]) != CORE_COLUMNS:
            raise TraceError(f"header must start with {','.join(CORE_COLUMNS)}", row=0, path=spath)
        extra_names = header[len(CORE_COLUMNS):]
        ts, cols = [], {name: [] for name in FEATURES}
        extras: dict[str, list[str]] = {name: [] for name in extra_names}
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) < len(CORE_COLUMNS):
                raise TraceError(f"expected >= {len(CORE_COLUMNS)} fields, got {len(row)}", row=row_no, path=spath)
            try:
                ts.append(int(row[0]))
            except ValueError:
                raise TraceError(f"cannot parse timestamp={row[0]!r}", row=row_no, path=spath) from None
            for j, name in enumerate(FEATURES, start=1):
                cols[name].append(_parse_float(row[j], name, row_no, spath))
            for j, name in enumerate(extra_names, start=len(CORE_COLUMNS)):
                extras[name].append(row[j] if j < len(row) else "")

    arrays = {k: np.array(v, dtype=float) for k, v in cols.items()}
    tsa = np.array(ts, dtype=np.int64)
    validate_columns(tsa, arrays["cgm"], arrays["basal"], arrays["bolus"], arrays["carbs"], path=spath)
    parsed_extras = {}
    for name, values in extras.items():
        try:
            parsed_extras[name] = np.array([float(v) if v else np.nan for v in values])
        except ValueError:
            parsed_extras[name] = np.array(values, dtype=object)
    return PatientTrace(
        patient_id=patient_id or path.stem,
        subset=subset,
        split=split,
        timestamps=tsa,
        cadence=cadence,
        extras=parsed_extras,
        **arrays,
    )


def write_trace_csv(trace: PatientTrace, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra_names = list(trace.extras)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CORE_COLUMNS) + extra_names)
        for i in range(len(trace)):
            row = [int(trace.timestamps[i])] + [repr(float(getattr(trace, c)[i])) for c in FEATURES]
            row += [trace.extras[n][i] for n in extra_names]
            w.writerow(row)


def read_manifest(path: str | Path) -> list[PatientTrace]:
    """Load every trace listed in a cohort manifest (paths relative to the manifest)."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TraceError(f"manifest is not valid JSON: {exc}", path=str(path)) from None
    if isinstance(entries, dict):
        entries = entries.get("traces", [])
    traces = []
    for i, entry in enumerate(entries, start=1):
        try:
            file = path.parent / entry["file"]
            traces.append(
                read_trace_csv(
                    file,
                    patient_id=entry["patient_id"],
                    subset=Subset(entry.get("subset", "Synthetic")),
                    split=Split(entry.get("split", "Train")),
                    cadence=int(entry.get("cadence", DEFAULT_CADENCE)),
                )
            )
        except (KeyError, ValueError) as exc:
            if isinstance(exc, TraceError):
                raise
            raise TraceError(f"bad manifest entry: {exc}", row=i, path=str(path)) from None
    return traces


def write_manifest(traces: Sequence[PatientTrace], directory: str | Path, name: str = "manifest.json") -> Path:
    directory = Path(directory)
    entries = []
    for tr in traces:
        rel = f"{tr.patient_id}_{tr.split.value.lower()}.csv"
        write_trace_csv(tr, directory / rel)
        entries.append(
            {
                "patient_id": tr.patient_id,
                "subset": tr.subset.value,
                "split": tr.split.value,
                "file": rel,
                "cadence": tr.cadence,
            }
        )
    out = directory / name
    out.write_text(json.dumps({"traces": entries}, indent=2, sort_keys=True) + "\n")
    return out


def load_traces(path: str | Path, format: str = "auto") -> list[PatientTrace]:
    """Load traces from a single patient CSV or a JSON cohort manifest."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "auto":
        format = "json" if path.suffix.lower() == ".json" else "csv"
    if format == "csv":
        return [read_trace_csv(path)]
    if format == "json":
        return read_manifest(path)
    raise ValueError(f"unknown trace format {format!r}")


def group_by_patient(traces: Sequence[PatientTrace]) -> dict[str, list[PatientTrace]]:
    out: dict[str, list[PatientTrace]] = {}
    for tr in traces:
        out.setdefault(tr.patient_id, []).append(tr)
    return dict(sorted(out.items()))
