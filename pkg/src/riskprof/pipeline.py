"""Stage orchestration with content-addressed caching.

Every stage writes into ``<out>/stages/<stage>-<key>`` where the key hashes
the stage's config slice, its derived seed and the keys of its upstream
stages. A stage directory holds ``stage.json`` with the sha256 of every input
and output file; a lookup is a hit only if that record parses and every
output still matches its hash. The run directory ``<out>/run-<confighash>``
holds the manifest that chains all stages plus a copy of the final report.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .attack import AttackRecords, SuccessRates, attack_trace, success_rates
from .cluster import GroupClustering, VulnerabilityClusters, cluster_group
from .config import STAGES, Config, canonical_json
from .data import PatientTrace, Split, group_by_patient, load_traces, write_manifest
from .detect import detector_from_dict, labeled_windows, write_verdicts_jsonl
from .evaluate import (
    CellResult,
    ConfusionCounts,
    ExperimentReport,
    RunResult,
    build_test_pool,
    emit_plot_data,
    evaluate_detector,
    fit_detector,
    overlay_rows,
    pool_summary,
    ratio_rows,
    training_cohorts,
)
from .predictor import ForecastModel, fit_forecaster
from .risk import RiskProfile, build_risk_profile
from .synth import generate_synthetic_cohort

log = logging.getLogger(__name__)

OUT_DIR_ENV = "RISKPROF_OUT_DIR"

DEPENDS: dict[str, tuple[str, ...]] = {
    "synth": (),
    "fit-predictor": ("synth",),
    "attack": ("synth", "fit-predictor"),
    "risk": ("synth", "fit-predictor", "attack"),
    "cluster": ("synth", "attack", "risk"),
    "fit-detector": ("synth", "attack", "cluster"),
    "evaluate": ("synth", "attack", "fit-detector"),
    "report": ("synth", "attack", "cluster", "fit-detector", "evaluate"),
}

# config sections each stage reads
SLICES: dict[str, tuple[str, ...]] = {
    "synth": ("data", "cohort", "thresholds"),
    "fit-predictor": ("forecaster",),
    "attack": ("attack", "thresholds", "forecaster"),
    "risk": ("risk", "thresholds", "forecaster"),
    "cluster": ("cluster",),
    "fit-detector": ("detect", "thresholds", "forecaster"),
    "evaluate": ("detect", "thresholds", "forecaster"),
    "report": ("thresholds", "forecaster"),
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


class MissingArtifactError(PipelineError):
    def __init__(self, stage: str, upstream: str):
        super().__init__(stage, f"missing upstream artifact from stage {upstream!r}; run `{upstream}` first")
        self.upstream = upstream


def derive_seed(root: int, stage: str) -> int:
    digest = hashlib.sha256(f"{root}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _files(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file() and p.name != "stage.json")


@dataclass(frozen=True)
class StageRecord:
    stage: str
    key: str
    path: Path
    outputs: dict[str, str]
    inputs: dict[str, str]
    seed: int


def _fit_personalized(args):
    traces, mode, h, horizon, tc = args
    return fit_forecaster(traces, mode, h, horizon, tc)


class Pipeline:
    def __init__(self, config: Config, out_dir: str | Path | None = None, jobs: int = 1):
        if out_dir is None:
            out_dir = os.environ.get(OUT_DIR_ENV, "runs")
        self.config = config
        self.out_dir = Path(out_dir)
        self.jobs = max(1, int(jobs))
        self.run_dir = self.out_dir / f"run-{config.hash[:12]}"
        self._keys: dict[str, str] = {}

    # -- keys and lookup ---------------------------------------------------

    def seed(self, stage: str) -> int:
        return derive_seed(self.config.seed, stage)

    def key(self, stage: str) -> str:
        if stage not in self._keys:
            payload = {
                "stage": stage,
                "version": __version__,
                "config": {s: self.config.values[s] for s in SLICES[stage]},
                "seed": self.seed(stage),
                "upstream": {d: self.key(d) for d in DEPENDS[stage]},
            }
            self._keys[stage] = hashlib.sha256(canonical_json(payload).encode()).hexdigest()
        return self._keys[stage]

    def stage_dir(self, stage: str) -> Path:
        return self.out_dir / "stages" / f"{stage}-{self.key(stage)[:16]}"

    def lookup(self, stage: str) -> StageRecord | None:
        """The cached record for ``stage`` if it is complete and untouched, else None."""
        path = self.stage_dir(stage)
        meta = path / "stage.json"
        if not meta.exists():
            return None
        try:
            rec = json.loads(meta.read_text())
            outputs = dict(rec["outputs"])
            if rec["key"] != self.key(stage):
                raise ValueError("key mismatch")
        except (ValueError, KeyError, TypeError) as exc:
            warnings.warn(f"stage {stage!r}: unreadable stage record ({exc}); recomputing", stacklevel=2)
            return None
        for rel, digest in outputs.items():
            f = path / rel
            if not f.exists():
                warnings.warn(f"stage {stage!r}: artifact {rel} is missing; recomputing", stacklevel=2)
                return None
            if sha256_file(f) != digest:
                warnings.warn(f"stage {stage!r}: artifact {rel} was modified; recomputing", stacklevel=2)
                return None
        return StageRecord(stage, rec["key"], path, outputs, dict(rec.get("inputs", {})), int(rec["seed"]))

    def require(self, stage: str, upstream: str) -> StageRecord:
        rec = self.lookup(upstream)
        if rec is None:
            raise MissingArtifactError(stage, upstream)
        return rec

    # -- running -----------------------------------------------------------

    def run(self, stage: str, force: bool = False) -> StageRecord:
        """Run one stage; its upstream stages must already be cached."""
        if stage not in STAGES:
            raise PipelineError(stage, "unknown stage")
        ups = {d: self.require(stage, d) for d in DEPENDS[stage]}
        if not force:
            hit = self.lookup(stage)
            if hit is not None:
                log.info("%s: cache hit (%s)", stage, hit.path.name)
                self._record(hit)
                return hit
        inputs = {}
        for d, rec in ups.items():
            for rel, digest in rec.outputs.items():
                inputs[f"{rec.path.name}/{rel}"] = digest
        final = self.stage_dir(stage)
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{stage}-", dir=final.parent))
        try:
            RUNNERS[stage](self, ups, tmp)
            outputs = {p.relative_to(tmp).as_posix(): sha256_file(p) for p in _files(tmp)}
            _write_json(tmp / "stage.json", {
                "stage": stage,
                "key": self.key(stage),
                "seed": self.seed(stage),
                "tool_version": __version__,
                "config": {s: self.config.values[s] for s in SLICES[stage]},
                "inputs": inputs,
                "outputs": outputs,
            })
            if final.exists():
                shutil.rmtree(final)
            tmp.rename(final)
        except PipelineError:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        except Exception as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc
        rec = StageRecord(stage, self.key(stage), final, outputs, inputs, self.seed(stage))
        self._record(rec)
        log.info("%s: done (%s)", stage, final.name)
        return rec

    def run_all(self, force: bool = False) -> dict[str, StageRecord]:
        return {s: self.run(s, force=force) for s in STAGES}

    # -- manifest ----------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    def read_manifest(self) -> dict:
        try:
            m = json.loads(self.manifest_path.read_text())
            if not isinstance(m.get("stages"), dict):
                raise ValueError("no stage table")
            return m
        except FileNotFoundError:
            pass
        except (ValueError, AttributeError) as exc:
            warnings.warn(f"run manifest unreadable ({exc}); starting a new one", stacklevel=2)
        return {}

    def _record(self, rec: StageRecord) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        m = self.read_manifest()
        m.update({
            "tool_version": __version__,
            "config_hash": self.config.hash,
            "config": self.config.values,
            "provenance": self.config.provenance(),
        })
        stages = m.setdefault("stages", {})
        stages[rec.stage] = {
            "key": rec.key,
            "dir": os.path.relpath(rec.path, self.run_dir),
            "seed": rec.seed,
            "inputs": rec.inputs,
            "outputs": rec.outputs,
        }
        m["stages"] = {s: stages[s] for s in STAGES if s in stages}
        tmp = self.manifest_path.with_suffix(".tmp")
        _write_json(tmp, m)
        tmp.replace(self.manifest_path)
        if rec.stage == "report":
            dest = self.run_dir / "report"
            if dest.exists():
                shutil.rmtree(dest)
            shutil.copytree(rec.path, dest, ignore=shutil.ignore_patterns("stage.json"))

    # -- shared loaders ----------------------------------------------------

    @staticmethod
    def traces(ups: dict[str, StageRecord]) -> list[PatientTrace]:
        return load_traces(ups["synth"].path / "cohort" / "manifest.json")

    @staticmethod
    def models(ups: dict[str, StageRecord]) -> tuple[ForecastModel, dict[str, ForecastModel]]:
        root = ups["fit-predictor"].path / "models"
        agg = ForecastModel.load(root / "aggregate.json")
        pers = {p.stem: ForecastModel.load(p) for p in sorted((root / "personalized").glob("*.json"))}
        return agg, pers

    @staticmethod
    def records(ups: dict[str, StageRecord], which: str) -> AttackRecords:
        return AttackRecords.read_jsonl(ups["attack"].path / f"{which}.jsonl")

    def map(self, fn: Callable, items: Sequence):
        if self.jobs == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ProcessPoolExecutor(max_workers=self.jobs) as ex:
            return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Stage bodies: (pipeline, upstream records, output dir) -> None


def _stage_synth(p: Pipeline, ups, out: Path) -> None:
    data = p.config.values["data"]
    th = p.config.thresholds()
    if data["source"] == "synthetic":
        traces = generate_synthetic_cohort(p.config.cohort(p.seed("synth")), th)
    else:
        traces = load_traces(data["path"], data["format"])
    if not traces:
        raise PipelineError("synth", "no traces")
    write_manifest(traces, out / "cohort")


def _stage_fit_predictor(p: Pipeline, ups, out: Path) -> None:
    f = p.config.values["forecaster"]
    tc = p.config.train_config(p.seed("fit-predictor"))
    train = [t for t in p.traces(ups) if t.split is Split.TRAIN]
    if not train:
        raise PipelineError("fit-predictor", "no Train-split traces")
    (out / "models" / "personalized").mkdir(parents=True)
    groups = group_by_patient(train)
    jobs = [(train, "aggregate", f["history_len"], f["horizon"], tc)]
    jobs += [(ts, "personalized", f["history_len"], f["horizon"], tc) for ts in groups.values()]
    fitted = p.map(_fit_personalized, jobs)
    fitted[0].save(out / "models" / "aggregate.json")
    for pid, model in zip(groups, fitted[1:]):
        model.save(out / "models" / "personalized" / f"{pid}.json")


def _attack_job(args):
    model, trace, horizon, kwargs, th = args
    return attack_trace(model, trace, horizon=horizon, thresholds=th, **kwargs)


def _stage_attack(p: Pipeline, ups, out: Path) -> None:
    traces = p.traces(ups)
    agg, pers = p.models(ups)
    horizon = p.config.values["forecaster"]["horizon"]
    kw = p.config.attack_kwargs()
    th = p.config.thresholds()
    tests = [t for t in traces if t.split is Split.TEST]
    if p.config.values["attack"]["victim_model"] == "personalized":
        missing = sorted({t.patient_id for t in tests} - set(pers))
        if missing:
            raise PipelineError("attack", f"no personalized model for {missing}")
        victims = [(pers[t.patient_id], t, horizon, kw, th) for t in tests]
    else:
        victims = [(agg, t, horizon, kw, th) for t in tests]
    victim = AttackRecords.concat(p.map(_attack_job, victims))
    victim.write_jsonl(out / "victim.jsonl")
    success_rates(victim).write_csv(out / "victim_success_rates.csv")
    # detector samples: the aggregate model attacked on every window
    aggregate = AttackRecords.concat(p.map(_attack_job, [(agg, t, horizon, kw, th) for t in traces]))
    aggregate.write_jsonl(out / "aggregate.jsonl")
    success_rates(aggregate.select(aggregate.split == Split.TEST.value)).write_csv(
        out / "aggregate_success_rates.csv"
    )


def _stage_risk(p: Pipeline, ups, out: Path) -> None:
    traces = p.traces(ups)
    agg, pers = p.models(ups)
    victim = p.records(ups, "victim")
    table = p.config.severity()
    horizon = p.config.values["forecaster"]["horizon"]
    th = p.config.thresholds()
    by_pid = group_by_patient([t for t in traces if t.split is Split.TEST])
    (out / "profiles").mkdir()
    personalized = p.config.values["attack"]["victim_model"] == "personalized"
    for pid, ts in by_pid.items():
        model = pers[pid] if personalized else agg
        prof = build_risk_profile(ts, model, victim, table, horizon, th)
        prof.write_csv(out / "profiles" / f"{pid}.csv")


def _load_profiles(rec: StageRecord) -> list[RiskProfile]:
    return [RiskProfile.read_csv(f) for f in sorted((rec.path / "profiles").glob("*.csv"))]


def _stage_cluster(p: Pipeline, ups, out: Path) -> None:
    traces = p.traces(ups)
    rates = SuccessRates.read_csv(ups["attack"].path / "victim_success_rates.csv").overall()
    profiles = {pr.patient_id: pr for pr in _load_profiles(ups["risk"])}
    subset_of = {t.patient_id: t.subset.value for t in traces}
    if p.config.values["cluster"]["group_by"] == "subset":
        groups: dict[str, list[str]] = {}
        for pid in sorted(profiles):
            groups.setdefault(subset_of[pid], []).append(pid)
    else:
        groups = {"all": sorted(profiles)}
    results: list[GroupClustering] = []
    for name, ids in sorted(groups.items()):
        if len(ids) < 2:
            raise PipelineError("cluster", f"group {name!r} has fewer than 2 patients")
        gc = cluster_group(name, [profiles[i] for i in ids], rates, p.config.linkage(), p.config.profile_prep())
        if gc.clusters is None:
            raise PipelineError(
                "cluster", f"group {name!r}: the largest-gap cut gave {len(gc.partition)} clusters; labelling needs 2"
            )
        results.append(gc)
        gc.dendrogram.write_json(out / f"dendrogram_{name}.json")
        (out / f"dendrogram_{name}.nwk").write_text(gc.dendrogram.to_newick() + "\n")
    combined = VulnerabilityClusters.union([g.clusters for g in results])
    _write_json(out / "clusters.json", {
        **combined.to_dict(),
        "groups": [g.to_dict() for g in results],
        "success_rate": {pid: rates[pid] for pid in sorted(rates)},
    })


def _load_clusters(rec: StageRecord) -> VulnerabilityClusters:
    return VulnerabilityClusters.from_dict(json.loads((rec.path / "clusters.json").read_text()))


def _model_name(detector: str, strategy: str, run: int, runs: int) -> str:
    return f"{detector}__{strategy}" + (f"__run{run}" if runs > 1 else "")


def _stage_fit_detector(p: Pipeline, ups, out: Path) -> None:
    traces = p.traces(ups)
    records = p.records(ups, "aggregate")
    clusters = _load_clusters(ups["cluster"])
    exp = p.config.experiment()
    th = p.config.thresholds()
    cohorts = training_cohorts(exp, clusters, traces, p.seed("fit-detector"))
    (out / "detectors").mkdir()
    index = []
    for strategy, runs in cohorts.items():
        for i, cohort in enumerate(runs):
            for det in exp.detectors:
                data = labeled_windows(cohort, records, exp.history_len, exp.horizon, exp.stride_for(det), th)
                name = _model_name(det, strategy, i, len(runs))
                model = fit_detector(det, data, exp)
                _write_json(out / "detectors" / f"{name}.json", model.to_dict())
                n_mal = int(data.labels.sum())
                index.append({
                    "name": name, "detector": det, "strategy": strategy, "run": i, "runs": len(runs),
                    "cohort": sorted({t.patient_id for t in cohort}),
                    "train_benign": len(data) - n_mal, "train_malicious": n_mal,
                })
    _write_json(out / "index.json", index)


def _stage_evaluate(p: Pipeline, ups, out: Path) -> None:
    traces = p.traces(ups)
    records = p.records(ups, "aggregate")
    exp = p.config.experiment()
    pool = build_test_pool(traces, records, exp, p.config.thresholds())
    root = ups["fit-detector"].path
    index = json.loads((root / "index.json").read_text())
    (out / "verdicts").mkdir()
    cells: dict[tuple[str, str], list] = {}
    for entry in index:
        model = detector_from_dict(json.loads((root / "detectors" / f"{entry['name']}.json").read_text()))
        counts, per, v = evaluate_detector(model, pool)
        write_verdicts_jsonl(out / "verdicts" / f"{entry['name']}.jsonl", pool, v)
        res = RunResult(tuple(entry["cohort"]), entry["train_benign"], entry["train_malicious"], counts, per)
        cells.setdefault((entry["detector"], entry["strategy"]), []).append(res)
    ordered = []
    for strategy in exp.strategies:
        for det in exp.detectors:
            ordered.append(CellResult(det, strategy, tuple(cells[(det, strategy)])))
    provenance = {
        "inputs": {
            f"{ups[s].path.name}/{rel}": digest
            for s in ("synth", "attack", "fit-detector")
            for rel, digest in sorted(ups[s].outputs.items())
            if s != "synth" or rel.endswith("manifest.json")
        },
        "defaults": p.config.provenance(),
    }
    seeds = {s: p.seed(s) for s in STAGES}
    report = ExperimentReport(tuple(ordered), pool_summary(pool), seeds, provenance)
    (out / "report.json").write_text(report.to_json())


def _stage_report(p: Pipeline, ups, out: Path) -> None:
    traces = p.traces(ups)
    records = p.records(ups, "aggregate")
    exp = p.config.experiment()
    th = p.config.thresholds()
    report_json = (ups["evaluate"].path / "report.json").read_text()
    report = _report_from_json(json.loads(report_json))
    (out / "report.json").write_text(report_json)

    clusters_doc = json.loads((ups["cluster"].path / "clusters.json").read_text())
    victim_rates = SuccessRates.read_csv(ups["attack"].path / "victim_success_rates.csv")
    agg_rates = SuccessRates.read_csv(ups["attack"].path / "aggregate_success_rates.csv")
    md = report.to_markdown() + "\n" + _vulnerability_markdown(traces, clusters_doc, victim_rates, agg_rates, th)
    (out / "report.md").write_text(md)

    overlays = {}
    root = ups["fit-detector"].path
    for entry in json.loads((root / "index.json").read_text()):
        if entry["runs"] > 1 or entry["strategy"] not in ("LessVulnerable", "AllPatients"):
            continue
        model = detector_from_dict(json.loads((root / "detectors" / f"{entry['name']}.json").read_text()))
        for t in traces:
            if t.split is Split.TEST:
                overlays[f"{entry['name']}__{t.patient_id}"] = overlay_rows(
                    model, t, records, exp.history_len, exp.horizon, th
                )
    emit_plot_data(report, out / "plots", traces, overlays, th)


def _report_from_json(d: dict) -> ExperimentReport:
    cells = []
    for c in d["cells"]:
        runs = tuple(
            RunResult(
                tuple(r["cohort"]), r["train_benign"], r["train_malicious"], ConfusionCounts(**r["counts"]),
                {pid: ConfusionCounts(**v["counts"]) for pid, v in r["per_patient"].items()},
            )
            for r in c["runs"]
        )
        cells.append(CellResult(c["detector"], c["strategy"], runs))
    return ExperimentReport(tuple(cells), d["test_pool"], d["seeds"], d["provenance"])


def _vulnerability_markdown(traces, clusters_doc, victim_rates, agg_rates, th) -> str:
    ratios = {pid: r for pid, _, r in ratio_rows(traces, th)}
    subset = {t.patient_id: t.subset.value for t in traces}
    less = set(clusters_doc["less_vulnerable"])

    def fmt(v):
        return "n/a" if v is None else f"{v:.1f}"

    lines = [
        "# Vulnerability",
        "",
        "| patient | subset | normal:abnormal | success % (victim model) | success % (aggregate model) | cluster |",
        "|---|---|---|---|---|---|",
    ]
    for pid in sorted(ratios):
        r = ratios[pid]
        lines.append(
            f"| {pid} | {subset[pid]} | {r if isinstance(r, str) else f'{r:.2f}'} | "
            f"{fmt(victim_rates.rate(pid))} | {fmt(agg_rates.rate(pid))} | "
            f"{'less vulnerable' if pid in less else 'more vulnerable'} |"
        )
    return "\n".join(lines) + "\n"


RUNNERS: dict[str, Callable[[Pipeline, dict, Path], None]] = {
    "synth": _stage_synth,
    "fit-predictor": _stage_fit_predictor,
    "attack": _stage_attack,
    "risk": _stage_risk,
    "cluster": _stage_cluster,
    "fit-detector": _stage_fit_detector,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}
