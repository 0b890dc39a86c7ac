"""Run configuration: one JSON document, validated against built-in defaults.

Unknown keys and out-of-range values are rejected. Every default carries a
short provenance note that is echoed into the run manifest.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .attack import AttackConstraints
from .cluster import Linkage, Metric, Order, ProfilePrep, Transform
from .data import CGM_MAX, MealContext, Thresholds
from .detect import KnnParams, OcsvmParams, StrategyKind
from .evaluate import DETECTORS, ExperimentConfig
from .predictor import TrainConfig
from .risk import SeverityTable
from .synth import SyntheticCohortConfig

STAGES = ("synth", "fit-predictor", "attack", "risk", "cluster", "fit-detector", "evaluate", "report")


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data": {"source": "synthetic", "path": None, "format": "auto"},
    "cohort": {
        "n_patients": 12,
        "trace_len": 2880,
        "seed": None,
        "normal_fraction": 0.75,
        "hypo_fraction": None,
        "subsets": None,
        "patient_ids": None,
        "baseline": 105.0,
        "regulation_tau": 60.0,
        "meal_scale": 40.0,
        "noise_scale": 12.0,
        "dip_scale": 30.0,
        "test_fraction": 0.2,
        "cadence": 300,
        "gap_rate": 0.0,
    },
    "thresholds": {"hypo": 70.0, "fasting_hyper": 125.0, "postprandial_hyper": 180.0, "postprandial_window_s": 7200},
    "forecaster": {
        "history_len": 12,
        "horizon": 6,
        "hidden": 32,
        "learning_rate": 0.05,
        "max_epochs": 2000,
        "patience": 50,
        "plateau_tol": 1e-6,
        "window_stride": 1,
        "min_windows": None,
    },
    "attack": {"step": 5.0, "max_iters": 200, "cgm_high": CGM_MAX, "victim_model": "personalized"},
    "risk": {"severity": {}, "same_state": 1.0},
    "cluster": {
        "linkage": "complete",
        "metric": "euclidean",
        "standardize": True,
        "transform": "none",
        "order": "time",
        "bins": None,
        "group_by": "subset",
    },
    "detect": {
        "detectors": list(DETECTORS),
        "strategies": [k.value for k in StrategyKind],
        "knn": {"k": 7, "p": 2.0, "weights": "uniform"},
        "ocsvm": {"nu": 0.5, "gamma": None, "coef0": 10.0, "tol": 1e-3, "max_iter": -1, "cache_mb": 200.0},
        "random_runs": 10,
        "random_cohort_size": 3,
        "train_stride": 1,
    },
}

# keys whose value is an open mapping rather than a fixed section
_FREE_MAPS = {("risk", "severity")}

PROVENANCE: dict[str, str] = {
    "thresholds": "hypo below 70 mg/dL; hyper above 125 fasting or 180 within two hours after carbs",
    "risk.severity": "exponential transition weights Hypo->Hyper 64, Normal->Hyper 32, Hypo->Normal 16, "
    "Hyper->Hypo 8, Hyper->Normal 4, Normal->Hypo 2",
    "risk.same_state": "assumption: weight 1 for a transition that leaves the state unchanged",
    "detect.knn": "k = 7, Minkowski p = 2, uniform weights",
    "detect.ocsvm": "sigmoid kernel, gamma = 1/n_features, coef0 = 10, nu = 0.5, tol = 1e-3, no iteration cap",
    "detect.random_runs": "10 random cohorts of 3 patients, metrics averaged",
    "forecaster.history_len": "assumption: 60 min of history (12 samples at 5 min)",
    "forecaster.horizon": "assumption: 30 min horizon (6 samples), the common benchmark setting",
    "forecaster.hidden": "assumption: one tanh hidden layer of 32 units stands in for the target network",
    "attack.step": "assumption: 5 mg/dL per greedy move",
    "attack.bounds": "cgm kept within [context hyper threshold, 499] mg/dL; only cgm is modified",
    "attack.max_iters": "assumption: cap on accepted greedy moves",
    "cluster.linkage": "assumption: complete linkage",
    "cluster.metric": "assumption: Euclidean distance on equal-length profiles",
    "cluster.cut": "cut at the largest gap between consecutive merge heights",
}


def _merge(defaults: Mapping, raw: Mapping, path: tuple[str, ...]) -> dict:
    out = copy.deepcopy(dict(defaults))
    for key, value in raw.items():
        where = ".".join(path + (key,))
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        d = defaults[key]
        if isinstance(d, dict) and path + (key,) not in _FREE_MAPS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"{where} must be a mapping")
            out[key] = _merge(d, value, path + (key,))
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set(cfg: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node[k]
    node[keys[-1]] = value


@dataclass(frozen=True)
class Config:
    values: dict

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.values).encode()).hexdigest()

    def section(self, name: str) -> dict:
        return self.values[name]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def thresholds(self) -> Thresholds:
        t = self.values["thresholds"]
        return Thresholds(
            hypo=float(t["hypo"]),
            fasting_hyper=float(t["fasting_hyper"]),
            postprandial_hyper=float(t["postprandial_hyper"]),
            postprandial_window_s=int(t["postprandial_window_s"]),
        )

    def cohort(self, derived_seed: int) -> SyntheticCohortConfig:
        c = dict(self.values["cohort"])
        if c["seed"] is None:
            c["seed"] = derived_seed
        return SyntheticCohortConfig(**c)

    def train_config(self, seed: int) -> TrainConfig:
        f = self.values["forecaster"]
        return TrainConfig(
            hidden=f["hidden"], learning_rate=f["learning_rate"], max_epochs=f["max_epochs"],
            patience=f["patience"], plateau_tol=f["plateau_tol"], window_stride=f["window_stride"],
            min_windows=f["min_windows"], seed=seed,
        )

    def attack_kwargs(self) -> dict:
        a = self.values["attack"]
        return {"step": float(a["step"]), "max_iters": int(a["max_iters"]), "cgm_high": float(a["cgm_high"])}

    def severity(self) -> SeverityTable:
        r = self.values["risk"]
        return SeverityTable.from_dict(r["severity"], float(r["same_state"]))

    def profile_prep(self) -> ProfilePrep:
        c = self.values["cluster"]
        return ProfilePrep(c["standardize"], Transform(c["transform"]), c["bins"], Order(c["order"]))

    def linkage(self) -> Linkage:
        return Linkage(self.values["cluster"]["linkage"])

    def experiment(self) -> ExperimentConfig:
        d = self.values["detect"]
        f = self.values["forecaster"]
        return ExperimentConfig(
            detectors=tuple(d["detectors"]),
            strategies=tuple(d["strategies"]),
            knn=KnnParams(**d["knn"]),
            ocsvm=OcsvmParams(**d["ocsvm"]),
            random_runs=d["random_runs"],
            random_cohort_size=d["random_cohort_size"],
            train_stride=d["train_stride"],
            history_len=f["history_len"],
            horizon=f["horizon"],
        )

    def provenance(self) -> dict[str, dict]:
        """Each documented default with its note and whether the config overrides it."""
        out = {}
        for key, note in sorted(PROVENANCE.items()):
            top, _, rest = key.partition(".")
            if rest in ("bounds", "cut"):
                current, default = self.values[top], DEFAULTS[top]
                overridden = False
            else:
                current = self.values[top] if not rest else self.values[top][rest]
                default = DEFAULTS[top] if not rest else DEFAULTS[top][rest]
                overridden = canonical_json(current) != canonical_json(default)
            out[key] = {"note": note, "overridden": overridden}
        return out


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate_config(raw: Mapping | None = None, overrides: Mapping[str, Any] | None = None) -> Config:
    """Apply defaults, reject unknown keys and check every range."""
    raw = {} if raw is None else raw
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a JSON object")
    values = _merge(DEFAULTS, raw, ())
    for dotted, value in (overrides or {}).items():
        _set(values, dotted, value)

    _check(isinstance(values["seed"], int) and values["seed"] >= 0, "seed must be a non-negative integer")
    data = values["data"]
    _check(data["source"] in ("synthetic", "files"), "data.source must be 'synthetic' or 'files'")
    _check(data["source"] != "files" or bool(data["path"]), "data.path is required when data.source is 'files'")
    _check(data["format"] in ("auto", "csv", "json"), "data.format must be auto, csv or json")

    def build(section: str, fn):
        try:
            return fn()
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"{section}: {exc}") from None

    cfg = Config(values)
    th = build("thresholds", cfg.thresholds)
    _check(0 < th.hypo < th.fasting_hyper <= th.postprandial_hyper <= CGM_MAX, "thresholds must satisfy 0 < hypo < fasting_hyper <= postprandial_hyper <= 499")
    _check(th.postprandial_window_s > 0, "thresholds.postprandial_window_s must be > 0")
    if data["source"] == "synthetic":
        build("cohort", lambda: cfg.cohort(0))

    f = values["forecaster"]
    for key in ("history_len", "horizon", "hidden", "max_epochs", "patience", "window_stride"):
        _check(isinstance(f[key], int) and f[key] >= 1, f"forecaster.{key} must be an integer >= 1")
    _check(f["learning_rate"] > 0, "forecaster.learning_rate must be > 0")
    _check(f["plateau_tol"] >= 0, "forecaster.plateau_tol must be >= 0")

    a = values["attack"]
    _check(a["victim_model"] in ("personalized", "aggregate"), "attack.victim_model must be personalized or aggregate")
    build("attack", lambda: AttackConstraints.for_context(MealContext.FASTING, th, **cfg.attack_kwargs()))
    _check(a["cgm_high"] >= th.postprandial_hyper, "attack.cgm_high must be >= the postprandial hyper threshold")

    build("risk", cfg.severity)

    c = values["cluster"]
    build("cluster", lambda: (Linkage(c["linkage"]), Metric(c["metric"]), cfg.profile_prep()))
    _check(c["group_by"] in ("subset", "none"), "cluster.group_by must be subset or none")

    d = values["detect"]
    _check(len(d["detectors"]) > 0 and len(d["strategies"]) > 0, "detect needs at least one detector and one strategy")
    _check(len(set(d["detectors"])) == len(d["detectors"]), "detect.detectors has duplicates")
    _check(len(set(d["strategies"])) == len(d["strategies"]), "detect.strategies has duplicates")
    build("detect", cfg.experiment)
    return cfg


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> Config:
    if path is None:
        return validate_config({}, overrides)
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return validate_config(raw, overrides)


def bundled_config_path(name: str = "synthetic.json") -> Path:
    return Path(str(resources.files("riskprof") / "configs" / name))
