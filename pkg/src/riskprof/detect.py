"""Anomaly detectors and the cohort strategies used to train them.

Two detectors share one interface: a labelled k-nearest-neighbour vote and a
one-class SVM with a sigmoid kernel fitted on benign windows only. Both work
on flattened windows z-normalised with statistics of their benign training
windows.
"""

from __future__ import annotations

import base64
import enum
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy.special import expit

from .attack import AttackRecords, AttackStatus
from .cluster import VulnerabilityClusters
from .data import DEFAULT_THRESHOLDS, PatientTrace, Split, Thresholds, windowize

log = logging.getLogger(__name__)


class Verdict(enum.IntEnum):
    BENIGN = 0
    MALICIOUS = 1


class ConvergenceError(RuntimeError):
    pass


def encode_array(a: np.ndarray) -> dict:
    """Exact, compact JSON form of a float array (little-endian float64, base64)."""
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"dtype": "<f8", "shape": list(a.shape), "b64": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: Mapping) -> np.ndarray:
    raw = base64.b64decode(d["b64"])
    return np.frombuffer(raw, dtype=d.get("dtype", "<f8")).reshape(d["shape"]).astype(float)


# ---------------------------------------------------------------------------
# Features


@dataclass(frozen=True, eq=False)
class FeatureNormalizer:
    """Per-feature z-scoring of ``(n, history, features)`` windows, then flattening."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, windows: np.ndarray) -> "FeatureNormalizer":
        windows = np.asarray(windows, dtype=float)
        if windows.ndim != 3 or windows.shape[0] == 0:
            raise ValueError("need a non-empty (n, history, features) array")
        # sorted columns make the statistics independent of window order
        flat = np.sort(windows.reshape(-1, windows.shape[2]), axis=0)
        scale = flat.std(axis=0)
        scale[scale < 1e-8] = 1.0
        return cls(flat.mean(axis=0), scale)

    @property
    def n_features(self) -> int:
        return int(self.mean.size)

    def transform(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, dtype=float)
        if windows.ndim != 3 or windows.shape[2] != self.n_features:
            raise ValueError(f"expected (n, history, {self.n_features}) windows, got {windows.shape}")
        z = (windows - self.mean) / self.scale
        return z.reshape(z.shape[0], -1)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureNormalizer":
        return cls(np.array(d["mean"], dtype=float), np.array(d["scale"], dtype=float))


@dataclass(frozen=True, eq=False)
class LabeledWindows:
    """Benign and malicious windows with where each came from."""

    windows: np.ndarray  # (n, history, features)
    labels: np.ndarray  # Verdict codes
    patient_id: np.ndarray
    timestamp: np.ndarray
    cgm: np.ndarray  # last observed cgm of each window, for overlays

    def __len__(self) -> int:
        return int(self.labels.size)

    def select(self, mask) -> "LabeledWindows":
        return LabeledWindows(**{k: v[mask] for k, v in self.__dict__.items()})

    @property
    def benign(self) -> np.ndarray:
        return self.windows[self.labels == Verdict.BENIGN]

    @property
    def malicious(self) -> np.ndarray:
        return self.windows[self.labels == Verdict.MALICIOUS]

    @classmethod
    def concat(cls, parts: Sequence["LabeledWindows"]) -> "LabeledWindows":
        keys = cls.__dataclass_fields__.keys()
        return cls(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in keys})


def labeled_windows(
    traces: Sequence[PatientTrace],
    records: AttackRecords,
    history_len: int,
    horizon: int,
    stride: int = 1,
    thresholds: Thresholds = DEFAULT_THRESHOLDS,
) -> LabeledWindows:
    """Every window of ``traces`` as benign, plus its successful attack as malicious.

    Records are matched to windows by (patient, split, timestamp).
    """
    parts = []
    for tr in traces:
        try:
            w = windowize(tr, history_len, horizon, thresholds)
        except ValueError:
            continue
        rec = records.for_patient(tr.patient_id, tr.split.value)
        pos = {int(t): i for i, t in enumerate(rec.timestamp)}
        if any(int(t) not in pos for t in w.timestamps):
            raise ValueError(f"attack records do not cover {tr.patient_id}/{tr.split.value}")
        keep = np.arange(0, len(w), stride)
        X = w.features[keep]
        ts = w.timestamps[keep]
        idx = np.array([pos[int(t)] for t in ts], dtype=np.int64)
        won = rec.status[idx] == AttackStatus.SUCCESS
        adv = X[won].copy()
        adv[:, :, 0] = rec.adversarial_cgm[idx[won]]
        n_b, n_m = X.shape[0], adv.shape[0]
        parts.append(
            LabeledWindows(
                windows=np.concatenate([X, adv]),
                labels=np.concatenate([np.zeros(n_b, np.int8), np.ones(n_m, np.int8)]),
                patient_id=np.full(n_b + n_m, tr.patient_id),
                timestamp=np.concatenate([ts, ts[won]]),
                cgm=np.concatenate([X[:, -1, 0], adv[:, -1, 0]]),
            )
        )
    if not parts:
        h, f = history_len, 4
        return LabeledWindows(np.zeros((0, h, f)), np.zeros(0, np.int8), np.zeros(0, str), np.zeros(0, np.int64), np.zeros(0))
    return LabeledWindows.concat(parts)


# ---------------------------------------------------------------------------
# Detector interface


class Detector(Protocol):
    kind: str
    normalizer: FeatureNormalizer

    def verdict_batch(self, windows: np.ndarray) -> np.ndarray: ...

    def to_dict(self) -> dict: ...


def verdict(model: Detector, window: np.ndarray) -> Verdict:
    window = np.asarray(window, dtype=float)
    if window.ndim != 2:
        raise ValueError(f"expected a 2-D window, got shape {window.shape}")
    return Verdict(int(model.verdict_batch(window[None])[0]))


# ---------------------------------------------------------------------------
# k nearest neighbours


@dataclass(frozen=True)
class KnnParams:
    k: int = 7
    p: float = 2.0
    weights: str = "uniform"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.p < 1:
            raise ValueError("Minkowski order p must be >= 1")
        if self.weights != "uniform":
            raise ValueError("only uniform weights are supported")


@dataclass(frozen=True, eq=False)
class KnnDetector:
    """Majority vote among the k nearest stored points.

    Equal distances are ordered malicious-first, then by stored index, and a
    split vote is malicious; the verdict therefore does not depend on the
    order the points were stored in.
    """

    params: KnnParams
    normalizer: FeatureNormalizer
    points: np.ndarray  # normalised, flattened
    labels: np.ndarray
    kind: str = "knn"
    chunk: int = field(default=512, repr=False)

    def neighbors(self, Z: np.ndarray) -> np.ndarray:
        """Indices of the k nearest stored points for each normalised query row."""
        k, p = self.params.k, self.params.p
        P = self.points
        out = np.empty((Z.shape[0], k), dtype=np.int64)
        sq = np.einsum("ij,ij->i", P, P) if p == 2 else None
        for a in range(0, Z.shape[0], self.chunk):
            Q = Z[a:a + self.chunk]
            if p == 2:
                # cheap pre-selection, then exact distances on a widened candidate set
                approx = sq[None, :] - 2.0 * Q @ P.T + np.einsum("ij,ij->i", Q, Q)[:, None]
                kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
                slack = 1e-9 * (np.abs(kth) + sq.max() + 1.0)
            for r in range(Q.shape[0]):
                if p == 2:
                    cand = np.flatnonzero(approx[r] <= kth[r] + slack[r])
                else:
                    cand = np.arange(P.shape[0])
                d = _minkowski(P[cand], Q[r], p)
                order = np.lexsort((cand, -self.labels[cand], d))[:k]
                out[a + r] = cand[order]
        return out

    def verdict_batch(self, windows: np.ndarray) -> np.ndarray:
        Z = self.normalizer.transform(windows)
        nn = self.neighbors(Z)
        votes = self.labels[nn].sum(axis=1)
        return (2 * votes >= self.params.k).astype(np.int8)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": {"k": self.params.k, "p": self.params.p, "weights": self.params.weights},
            "normalization": self.normalizer.to_dict(),
            "points": encode_array(self.points),
            "labels": self.labels.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "KnnDetector":
        return cls(
            KnnParams(**d["params"]),
            FeatureNormalizer.from_dict(d["normalization"]),
            decode_array(d["points"]),
            np.array(d["labels"], dtype=np.int8),
        )


def _minkowski(P: np.ndarray, q: np.ndarray, p: float) -> np.ndarray:
    diff = np.abs(P - q)
    if p == 2:
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if p == 1:
        return diff.sum(axis=1)
    return (diff**p).sum(axis=1) ** (1.0 / p)


def fit_knn(
    benign: np.ndarray, malicious: np.ndarray, params: KnnParams = KnnParams()
) -> KnnDetector:
    benign = np.asarray(benign, dtype=float)
    malicious = np.asarray(malicious, dtype=float)
    if benign.shape[0] == 0 or malicious.shape[0] == 0:
        raise ValueError("kNN needs both benign and malicious training windows")
    n = benign.shape[0] + malicious.shape[0]
    if params.k > n:
        raise ValueError(f"k = {params.k} exceeds the {n} stored points")
    norm = FeatureNormalizer.fit(benign)
    points = np.concatenate([norm.transform(benign), norm.transform(malicious)])
    labels = np.concatenate([np.zeros(benign.shape[0], np.int8), np.ones(malicious.shape[0], np.int8)])
    return KnnDetector(params, norm, points, labels)


# ---------------------------------------------------------------------------
# One-class SVM


@dataclass(frozen=True)
class OcsvmParams:
    """Sigmoid-kernel one-class SVM settings; ``gamma=None`` means 1 / n_features."""

    nu: float = 0.5
    gamma: float | None = None
    coef0: float = 10.0
    tol: float = 1e-3
    max_iter: int = -1  # -1: no cap
    cache_mb: float = 200.0

    def __post_init__(self) -> None:
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"nu must lie in (0, 1], got {self.nu}")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")


class SigmoidKernel:
    """``tanh(gamma * <x, y> + coef0)`` kept in the shifted, rescaled form

    ``q(x, y) = (k(x, y) - 1) / (1 - tanh(coef0))``.

    Near saturation ``k - 1`` is far below double precision of ``k`` itself;
    the identity ``tanh(z) - 1 = -2 * expit(-2 z)`` keeps every digit. A
    constant shift of the kernel does not move the constrained optimum
    (``sum(alpha) = 1``), and the rescaling only sets the unit of ``tol``.
    """

    def __init__(self, gamma: float, coef0: float):
        self.gamma = float(gamma)
        self.coef0 = float(coef0)
        self.unit = 2.0 * float(expit(-2.0 * self.coef0))

    def q(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        z = self.gamma * (A @ B.T) + self.coef0
        return -2.0 * expit(-2.0 * z) / self.unit

    def raw(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return np.tanh(self.gamma * (A @ B.T) + self.coef0)


class _ColumnCache:
    def __init__(self, X: np.ndarray, kernel: SigmoidKernel, budget_bytes: float):
        self.X = X
        self.kernel = kernel
        self.capacity = max(2, int(budget_bytes // max(1, X.shape[0] * 8)))
        self.store: OrderedDict[int, np.ndarray] = OrderedDict()

    def __call__(self, i: int) -> np.ndarray:
        col = self.store.get(i)
        if col is not None:
            self.store.move_to_end(i)
            return col
        col = self.kernel.q(self.X, self.X[i:i + 1])[:, 0]
        self.store[i] = col
        if len(self.store) > self.capacity:
            self.store.popitem(last=False)
        return col


@dataclass(frozen=True)
class DualSolution:
    alpha: np.ndarray
    rho: float  # in the shifted, rescaled kernel units
    iterations: int
    objective: float


def solve_one_class_dual(
    X: np.ndarray, params: OcsvmParams, kernel: SigmoidKernel | None = None
) -> DualSolution:
    """SMO with second-order working-set selection on

    minimise ``0.5 * a' Q a`` subject to ``0 <= a_i <= 1/(nu n)`` and ``sum(a) = 1``.

    ``Q`` may be indefinite; a non-positive curvature along the chosen pair is
    replaced by a tiny positive value, so each step still lowers the objective
    and is clipped to the box.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n < 2:
        raise ValueError("one-class SVM needs at least 2 training windows")
    if kernel is None:
        kernel = SigmoidKernel(params.gamma or 1.0 / X.shape[1], params.coef0)
    C = 1.0 / (params.nu * n)
    tau = 1e-12
    eps = params.tol

    n_full = int(math.floor(params.nu * n))
    alpha = np.zeros(n)
    alpha[:n_full] = C
    if n_full < n:
        alpha[n_full] = max(0.0, 1.0 - n_full * C)
    alpha[alpha > C] = C

    column = _ColumnCache(X, kernel, params.cache_mb * 2**20)
    diag = np.array([kernel.q(X[i:i + 1], X[i:i + 1])[0, 0] for i in range(n)])
    G = np.zeros(n)
    for i in np.flatnonzero(alpha):
        G += alpha[i] * column(int(i))

    it = 0
    while True:
        if params.max_iter >= 0 and it >= params.max_iter:
            raise ConvergenceError(f"SMO did not converge within {params.max_iter} iterations")
        up = alpha < C
        low = alpha > 0
        minus_g = -G
        cand_up = np.where(up, minus_g, -np.inf)
        i = int(np.argmax(cand_up))
        gmax = cand_up[i]
        gmax2 = np.max(np.where(low, G, -np.inf))
        if gmax + gmax2 < eps:
            break
        Qi = column(i)
        b = gmax + G  # b_it = -G_i + G_t
        ok = low & (b > 0)
        if not ok.any():
            break
        a = diag[i] + diag - 2.0 * Qi
        a = np.where(a > 0, a, tau)
        score = np.where(ok, -(b * b) / a, np.inf)
        j = int(np.argmin(score))
        Qj = column(j)

        quad = diag[i] + diag[j] - 2.0 * Qi[j]
        if quad <= 0:
            quad = tau
        old_i, old_j = alpha[i], alpha[j]
        delta = (G[i] - G[j]) / quad
        total = old_i + old_j
        ai, aj = old_i - delta, old_j + delta
        if total > C:
            if ai > C:
                ai, aj = C, total - C
        elif aj < 0:
            aj, ai = 0.0, total
        if total > C:
            if aj > C:
                aj, ai = C, total - C
        elif ai < 0:
            ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        G += Qi * (ai - old_i) + Qj * (aj - old_j)
        it += 1

    at_upper = alpha >= C
    at_lower = alpha <= 0
    free = ~at_upper & ~at_lower
    if free.any():
        rho = float(G[free].mean())
    else:
        ub = np.min(G[at_lower]) if at_lower.any() else np.inf
        lb = np.max(G[at_upper]) if at_upper.any() else -np.inf
        rho = float((ub + lb) / 2)
    objective = 0.5 * float(alpha @ G)
    return DualSolution(alpha, rho, it, objective)


@dataclass(frozen=True, eq=False)
class OcsvmDetector:
    """Benign iff ``sum_i alpha_i k(x_i, x) - rho >= 0`` (evaluated in shifted units)."""

    params: OcsvmParams
    normalizer: FeatureNormalizer
    support: np.ndarray
    alpha: np.ndarray
    rho_shifted: float
    gamma: float
    iterations: int = 0
    kind: str = "ocsvm"

    @property
    def kernel(self) -> SigmoidKernel:
        return SigmoidKernel(self.gamma, self.params.coef0)

    @property
    def rho(self) -> float:
        """Offset against the unshifted kernel."""
        return 1.0 + self.kernel.unit * self.rho_shifted

    def decision_function(self, windows: np.ndarray) -> np.ndarray:
        """Decision values in shifted kernel units; the sign is the verdict."""
        Z = self.normalizer.transform(windows)
        out = np.empty(Z.shape[0])
        kern = self.kernel
        for a in range(0, Z.shape[0], 2048):
            out[a:a + 2048] = kern.q(Z[a:a + 2048], self.support) @ self.alpha - self.rho_shifted
        return out

    def verdict_batch(self, windows: np.ndarray) -> np.ndarray:
        return (self.decision_function(windows) < 0).astype(np.int8)

    def to_dict(self) -> dict:
        p = self.params
        return {
            "kind": self.kind,
            "params": {
                "nu": p.nu, "gamma": p.gamma, "coef0": p.coef0, "tol": p.tol,
                "max_iter": p.max_iter, "cache_mb": p.cache_mb,
            },
            "gamma_effective": self.gamma,
            "normalization": self.normalizer.to_dict(),
            "support": encode_array(self.support),
            "alpha": encode_array(self.alpha),
            "rho_shifted": self.rho_shifted,
            "rho": self.rho,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OcsvmDetector":
        return cls(
            OcsvmParams(**d["params"]),
            FeatureNormalizer.from_dict(d["normalization"]),
            decode_array(d["support"]),
            decode_array(d["alpha"]),
            float(d["rho_shifted"]),
            float(d["gamma_effective"]),
            int(d.get("iterations", 0)),
        )


def fit_ocsvm(benign: np.ndarray, params: OcsvmParams = OcsvmParams()) -> OcsvmDetector:
    benign = np.asarray(benign, dtype=float)
    if benign.shape[0] < 2:
        raise ValueError("one-class SVM needs at least 2 training windows")
    norm = FeatureNormalizer.fit(benign)
    Z = norm.transform(benign)
    gamma = params.gamma if params.gamma is not None else 1.0 / Z.shape[1]
    sol = solve_one_class_dual(Z, params, SigmoidKernel(gamma, params.coef0))
    sv = sol.alpha > 0
    log.info("ocsvm: n=%d, %d support vectors, %d iterations", Z.shape[0], int(sv.sum()), sol.iterations)
    return OcsvmDetector(params, norm, Z[sv], sol.alpha[sv], sol.rho, gamma, sol.iterations)


def detector_from_dict(d: Mapping) -> Detector:
    if d["kind"] == "knn":
        return KnnDetector.from_dict(d)
    if d["kind"] == "ocsvm":
        return OcsvmDetector.from_dict(d)
    raise ValueError(f"unknown detector kind {d['kind']!r}")


def save_detector(model: Detector, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n")


def load_detector(path: str | Path) -> Detector:
    return detector_from_dict(json.loads(Path(path).read_text()))


def write_verdicts_jsonl(path: str | Path, data: LabeledWindows, verdicts: np.ndarray) -> None:
    with Path(path).open("w") as fh:
        for i in range(len(data)):
            fh.write(json.dumps({
                "patient_id": str(data.patient_id[i]),
                "timestamp": int(data.timestamp[i]),
                "truth": Verdict(int(data.labels[i])).name.lower(),
                "verdict": Verdict(int(verdicts[i])).name.lower(),
            }, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Training strategies


class StrategyKind(enum.Enum):
    LESS_VULNERABLE = "LessVulnerable"
    MORE_VULNERABLE = "MoreVulnerable"
    RANDOM_SAMPLES = "RandomSamples"
    ALL_PATIENTS = "AllPatients"


@dataclass(frozen=True)
class TrainingStrategy:
    kind: StrategyKind
    runs: int = 10
    cohort_size: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.runs < 1 or self.cohort_size < 1:
            raise ValueError("runs and cohort_size must be >= 1")

    @property
    def name(self) -> str:
        return self.kind.value


def select_training_set(
    strategy: TrainingStrategy,
    clusters: VulnerabilityClusters,
    traces: Sequence[PatientTrace],
    seed: int,
) -> list[list[PatientTrace]]:
    """Train-split traces for each training cohort (one cohort unless RandomSamples)."""
    train = [t for t in traces if t.split is Split.TRAIN]
    ids = sorted({t.patient_id for t in train})

    def pick(members) -> list[PatientTrace]:
        return [t for t in train if t.patient_id in members]

    kind = strategy.kind
    if kind is StrategyKind.ALL_PATIENTS:
        return [pick(set(ids))]
    if kind is StrategyKind.LESS_VULNERABLE:
        return [pick(clusters.less_vulnerable)]
    if kind is StrategyKind.MORE_VULNERABLE:
        return [pick(clusters.more_vulnerable)]
    if len(ids) < strategy.cohort_size:
        raise ValueError(f"RandomSamples needs at least {strategy.cohort_size} patients, got {len(ids)}")
    rng = np.random.default_rng(seed)
    cohorts = []
    for _ in range(strategy.runs):
        chosen = sorted(rng.choice(ids, size=strategy.cohort_size, replace=False).tolist())
        cohorts.append(pick(set(chosen)))
    return cohorts
