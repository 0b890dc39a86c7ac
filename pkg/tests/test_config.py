import json

import pytest

from riskprof.config import (
    DEFAULTS,
    ConfigError,
    bundled_config_path,
    canonical_json,
    load_config,
    validate_config,
)
from riskprof.risk import DEFAULT_SEVERITY


def test_empty_config_is_valid():
    cfg = validate_config({})
    assert cfg.values == DEFAULTS
    exp = cfg.experiment()
    assert (exp.knn.k, exp.knn.p) == (7, 2.0)
    assert (exp.ocsvm.nu, exp.ocsvm.coef0, exp.ocsvm.tol, exp.ocsvm.max_iter) == (0.5, 10.0, 1e-3, -1)
    assert exp.random_runs == 10 and exp.random_cohort_size == 3
    assert cfg.severity().to_dict() == DEFAULT_SEVERITY.to_dict()


@pytest.mark.parametrize(
    "raw, match",
    [
        ({"risk": {"severity": {"Hypo->Hyper": 0}}}, "risk"),
        ({"detect": {"ocsvm": {"nu": 1.5}}}, "nu"),
        ({"detect": {"knn": {"k": 0}}}, "k must"),
        ({"forecast": {}}, "unknown config key 'forecast'"),
        ({"cluster": {"order": "random"}}, "cluster"),
        ({"seed": -1}, "seed"),
        ({"thresholds": {"hypo": 200}}, "thresholds"),
        ({"data": {"source": "files"}}, "data.path"),
        ({"forecaster": {"horizon": 0}}, "horizon"),
        ({"detect": {"strategies": ["AllPatients", "AllPatients"]}}, "duplicates"),
        ({"attack": "fast"}, "mapping"),
    ],
)
def test_invalid_configs(raw, match):
    with pytest.raises(ConfigError, match=match):
        validate_config(raw)


def test_overrides_and_hash():
    a = validate_config({}, {"seed": 3})
    assert a.seed == 3
    assert a.hash != validate_config({}).hash
    assert validate_config({"seed": 3}).hash == a.hash


def test_provenance_flags_overrides():
    prov = validate_config({"detect": {"knn": {"k": 5}}}).provenance()
    assert prov["detect.knn"]["overridden"] is True
    assert prov["detect.ocsvm"]["overridden"] is False
    assert prov["risk.same_state"]["note"].startswith("assumption")


def test_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_bundled_config_loads():
    cfg = load_config(bundled_config_path())
    raw = json.loads(bundled_config_path().read_text())
    assert canonical_json(cfg.values["cohort"]["patient_ids"]) == canonical_json(raw["cohort"]["patient_ids"])
    assert cfg.experiment().stride_for("ocsvm") == 4
