"""Synthetic type-1 diabetes cohorts with a controlled share of normal glucose.

Each patient's glucose is ``baseline + amplitude * shape(t)`` where ``shape``
combines meal responses, insulin-driven dips, a circadian term and an AR(1)
disturbance. The amplitude is found by bisection so that the realised
fraction of Normal samples matches the configured ``normal_fraction``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .data import (
    DEFAULT_THRESHOLDS,
    DiagnosticState,
    PatientTrace,
    Split,
    Subset,
    Thresholds,
    classify_states,
    postprandial_mask,
)

DAY_S = 86400
CGM_FLOOR = 40.0
CGM_CEIL = 400.0


@dataclass(frozen=True)
class SyntheticCohortConfig:
    n_patients: int
    trace_len: int = 2880
    seed: int = 0
    normal_fraction: Sequence[float] | float = 0.75
    subsets: Sequence[str] | None = None
    patient_ids: Sequence[str] | None = None
    baseline: Sequence[float] | float = 105.0
    regulation_tau: Sequence[float] | float = 60.0  # minutes
    hypo_fraction: Sequence[float | None] | float | None = None
    meal_scale: float = 40.0
    noise_scale: float = 12.0
    dip_scale: float = 30.0
    test_fraction: float = 0.2
    cadence: int = 300
    gap_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        if self.trace_len < 2:
            raise ValueError("trace_len must be >= 2")
        for name in ("normal_fraction", "baseline", "regulation_tau"):
            value = getattr(self, name)
            if not np.isscalar(value):
                value = tuple(float(v) for v in value)
                if len(value) != self.n_patients:
                    raise ValueError(f"{name} needs {self.n_patients} entries, got {len(value)}")
                object.__setattr__(self, name, value)
        hf = self.hypo_fraction
        if hf is not None and not np.isscalar(hf):
            hf = tuple(None if v is None else float(v) for v in hf)
            if len(hf) != self.n_patients:
                raise ValueError(f"hypo_fraction needs {self.n_patients} entries, got {len(hf)}")
            object.__setattr__(self, "hypo_fraction", hf)
        for nf, hypo in zip(self.fractions(), self.hypo_fractions()):
            if not 0.0 < nf < 1.0:
                raise ValueError(f"normal_fraction must lie in (0, 1), got {nf}")
            if hypo is not None and not 0.0 <= hypo <= 1.0 - nf:
                raise ValueError(f"hypo_fraction must lie in [0, 1 - normal_fraction], got {hypo}")
        if min(self.taus(), default=1.0) <= 0:
            raise ValueError("regulation_tau must be > 0")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        if self.gap_rate < 0:
            raise ValueError("gap_rate must be >= 0")
        for name in ("subsets", "patient_ids"):
            value = getattr(self, name)
            if value is not None:
                value = tuple(value)
                if len(value) != self.n_patients:
                    raise ValueError(f"{name} needs {self.n_patients} entries")
                object.__setattr__(self, name, value)
        if self.patient_ids is not None and len(set(self.patient_ids)) != self.n_patients:
            raise ValueError("patient_ids must be unique")

    def fractions(self) -> list[float]:
        nf = self.normal_fraction
        return [float(nf)] * self.n_patients if np.isscalar(nf) else list(nf)

    def baselines(self) -> list[float]:
        b = self.baseline
        return [float(b)] * self.n_patients if np.isscalar(b) else list(b)

    def taus(self) -> list[float]:
        tau = self.regulation_tau
        return [float(tau)] * self.n_patients if np.isscalar(tau) else list(tau)

    def hypo_fractions(self) -> list[float | None]:
        hf = self.hypo_fraction
        if hf is None or np.isscalar(hf):
            return [None if hf is None else float(hf)] * self.n_patients
        return list(hf)

    def subset_list(self) -> list[Subset]:
        if self.subsets is None:
            return [Subset.SYNTHETIC] * self.n_patients
        return [Subset(s) for s in self.subsets]

    def id_list(self) -> list[str]:
        if self.patient_ids is not None:
            return list(self.patient_ids)
        return [f"p{i}" for i in range(self.n_patients)]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class _Shape:
    shape: np.ndarray
    carbs: np.ndarray
    bolus: np.ndarray
    basal: np.ndarray
    keep: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _gamma_kernel(n: int, peak: float) -> np.ndarray:
    tau = np.arange(n, dtype=float)
    return (tau / peak) * np.exp(1.0 - tau / peak)


def _patient_shape(rng: np.random.Generator, n: int, cfg: SyntheticCohortConfig, tau_min: float) -> _Shape:
    steps_per_hour = 3600 // cfg.cadence
    steps_per_day = DAY_S // cfg.cadence
    n_days = n // steps_per_day + 2

    carbs = np.zeros(n)
    bolus = np.zeros(n)
    meal_drive = np.zeros(n)
    dip_drive = np.zeros(n)
    icr = rng.uniform(8.0, 14.0)
    for day in range(n_days):
        meals = [(7.0, 30, 80), (12.5, 30, 80), (18.5, 30, 80)]
        if rng.random() < 0.3:
            meals.append((15.5, 10, 25))
        for hour, lo, hi in meals:
            at = day * steps_per_day + int(round((hour + rng.normal(0, 0.5)) * steps_per_hour))
            grams = float(np.round(rng.uniform(lo, hi)))
            if 0 <= at < n:
                carbs[at] += grams
                bolus[at] += np.round(grams / icr, 1)
                meal_drive[at] += grams / 50.0
        # insulin-driven dips (correction doses)
        for _ in range(rng.poisson(1.0)):
            at = day * steps_per_day + int(rng.integers(0, steps_per_day))
            depth = rng.uniform(0.5, 1.0)
            if 0 <= at < n:
                bolus[at] += np.round(1.5 * depth, 1)
                dip_drive[at] += depth

    meal_resp = np.convolve(meal_drive, _gamma_kernel(6 * steps_per_hour, steps_per_hour))[:n]
    dip_resp = np.convolve(dip_drive, _gamma_kernel(8 * steps_per_hour, 1.5 * steps_per_hour))[:n]
    t = np.arange(n) * cfg.cadence
    circadian = 0.25 * np.sin(2 * np.pi * (t - 4 * 3600) / DAY_S)

    phi = np.exp(-cfg.cadence / (60.0 * tau_min))
    eps = rng.normal(0.0, np.sqrt(1 - phi**2), n)
    ar = np.empty(n)
    ar[0] = rng.normal()
    for i in range(1, n):
        ar[i] = phi * ar[i - 1] + eps[i]

    shape = (
        cfg.meal_scale * meal_resp
        - cfg.dip_scale * dip_resp
        + cfg.noise_scale * (circadian + ar)
    ) / 40.0

    basal_rate = np.round(rng.uniform(0.6, 1.4), 2)
    basal = np.full(n, basal_rate)
    night = ((t % DAY_S) < 6 * 3600)
    basal[night] = np.round(basal_rate * 1.1, 2)

    keep = np.ones(n, dtype=bool)
    if cfg.gap_rate > 0:
        for _ in range(rng.poisson(cfg.gap_rate * n / steps_per_day)):
            start = int(rng.integers(1, max(2, n - 12)))
            keep[start:start + int(rng.integers(6, 13))] = False
    return _Shape(shape, carbs, bolus, basal, keep)


def _glucose(baseline: float, amplitude: float, shape: np.ndarray) -> np.ndarray:
    return np.clip(np.round(baseline + 40.0 * amplitude * shape), CGM_FLOOR, CGM_CEIL)


def _normal_fraction(g: np.ndarray, pp: np.ndarray, thresholds: Thresholds) -> float:
    return float(np.mean(classify_states(g, pp, thresholds) == DiagnosticState.NORMAL))


def _calibrate(
    baseline: float, shape: np.ndarray, pp: np.ndarray, target: float, thresholds: Thresholds
) -> float:
    lo, hi = 0.0, 1.0
    while _normal_fraction(_glucose(baseline, hi, shape), pp, thresholds) > target and hi < 1e3:
        lo, hi = hi, hi * 2
    best, best_err = hi, abs(_normal_fraction(_glucose(baseline, hi, shape), pp, thresholds) - target)
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        frac = _normal_fraction(_glucose(baseline, mid, shape), pp, thresholds)
        if abs(frac - target) < best_err:
            best, best_err = mid, abs(frac - target)
        if frac > target:
            lo = mid
        else:
            hi = mid
    return best


def _calibrate_baseline(
    shape: np.ndarray, pp: np.ndarray, nf: float, hypo: float, thresholds: Thresholds
) -> tuple[float, float]:
    """Find (baseline, amplitude) giving both the normal and the hypo fraction."""

    def at(b: float) -> tuple[float, float]:
        amp = _calibrate(b, shape, pp, nf, thresholds)
        return float(np.mean(_glucose(b, amp, shape) < thresholds.hypo)), amp

    lo, hi = thresholds.hypo, thresholds.postprandial_hyper
    best = None
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        frac, amp = at(mid)
        err = abs(frac - hypo)
        if best is None or err < best[0]:
            best = (err, mid, amp)
        if frac > hypo:
            lo = mid
        else:
            hi = mid
    return best[1], best[2]


def generate_patient(
    cfg: SyntheticCohortConfig, index: int, thresholds: Thresholds = DEFAULT_THRESHOLDS
) -> list[PatientTrace]:
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.trace_len
    sh = _patient_shape(rng, n, cfg, cfg.taus()[index])
    ts = np.arange(n, dtype=np.int64) * cfg.cadence
    pp = postprandial_mask(ts, ts[sh.carbs > 0], thresholds.postprandial_window_s)
    nf, hypo = cfg.fractions()[index], cfg.hypo_fractions()[index]
    if hypo is None:
        baseline = cfg.baselines()[index]
        amp = _calibrate(baseline, sh.shape, pp, nf, thresholds)
    else:
        baseline, amp = _calibrate_baseline(sh.shape, pp, nf, hypo, thresholds)
    cgm = _glucose(baseline, amp, sh.shape)

    keep = sh.keep
    n_test = int(round(n * cfg.test_fraction))
    cut = n - n_test
    pid = cfg.id_list()[index]
    subset = cfg.subset_list()[index]
    out = []
    for split, sl in ((Split.TRAIN, slice(0, cut)), (Split.TEST, slice(cut, n))):
        m = keep[sl]
        if not m.any():
            continue
        out.append(
            PatientTrace(
                patient_id=pid,
                subset=subset,
                split=split,
                timestamps=ts[sl][m],
                cgm=cgm[sl][m],
                basal=sh.basal[sl][m],
                bolus=sh.bolus[sl][m],
                carbs=sh.carbs[sl][m],
                cadence=cfg.cadence,
            )
        )
    return out


def generate_synthetic_cohort(
    config: SyntheticCohortConfig, thresholds: Thresholds = DEFAULT_THRESHOLDS
) -> list[PatientTrace]:
    """Generate Train and Test traces for every configured patient."""
    traces: list[PatientTrace] = []
    for i in range(config.n_patients):
        traces.extend(generate_patient(config, i, thresholds))
    return traces
