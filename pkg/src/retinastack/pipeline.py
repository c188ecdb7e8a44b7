"""Run-directory orchestration of every pipeline stage.

A run directory holds the config snapshot, a ledger of stage status and
artifacts, and the artifacts themselves::

    config.json  ledger.json  folds.csv
    tuning/<model>.trials.jsonl   tuning/<model>.spec.json
    models/<model>/fold<k>.json   predictions/<model>/fold<k>.csv
    oof.csv  holdout.csv  meta.json
    reports/<model>.json  roc/<model>/<label>.csv  importance/<label>.csv
    report.json

Stages are independently runnable; each checks that the stages it reads
from have completed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import __version__
from .base_trainer import BaseLearnerModel, BaseLearnerSpec, PredictionMatrix, predict, train_fold
from .core import (
    SAMPLE_ID,
    BinaryLabelMatrix,
    FeatureTable,
    LabelSchema,
    PipelineConfig,
    binarize_manifest,
    load_features,
    load_manifest,
)
from .errors import DimensionMismatch, IncompleteRun, InvalidConfig, ShapeMismatch, ValidationError
from .hyperopt import SearchSpace, save_trial_log, tune_base_learner
from .metrics import MetricsReport, macro_report, roc_curve
from .stacking import (
    GbdtMetaLearner,
    GbdtParams,
    OofMatrix,
    assemble_oof,
    feature_importance,
    fit_meta,
    holdout_split,
    predict_meta,
    save_importance,
)
from .stratify import FoldAssignment, split_views, stratified_kfold
from .taxonomy import LabelMapping, load_external_manifest, map_ground_truth

log = logging.getLogger(__name__)

STAGES = ("split", "tune", "train", "oof", "stack", "eval", "report")

# (model_id, hidden_units) for the base learner roster, cycled past six
ROSTER = (("linear_a", 0), ("mlp16", 16), ("linear_b", 0), ("mlp32", 32), ("mlp8", 8), ("mlp64", 64))


def derive_seed(root: int, *names) -> int:
    """Stage sub-seed: root XOR a stable 64-bit hash of the stage name path."""
    digest = hashlib.sha256("/".join(str(n) for n in names).encode()).digest()
    return (root ^ int.from_bytes(digest[:8], "little")) & (2**64 - 1)


def reference_presets() -> list[dict]:
    text = resources.files("retinastack.data").joinpath("reference_hyperparameters.json").read_text(encoding="utf-8")
    return json.loads(text)["models"]


def roster(config: PipelineConfig) -> list[BaseLearnerSpec]:
    presets = reference_presets()
    specs = []
    for i in range(config.n_models):
        name, hidden = ROSTER[i % len(ROSTER)]
        model_id = name if i < len(ROSTER) else f"{name}_{i // len(ROSTER)}"
        p = presets[i % len(presets)]
        specs.append(
            BaseLearnerSpec(
                model_id=model_id,
                hidden_units=hidden,
                dropout_rate=p["dropout_rate"],
                learning_rate=p["learning_rate"],
                weight_decay=p["weight_decay"],
                feature_subset_seed=derive_seed(config.seed, "features", model_id) if config.n_models > 1 else None,
            )
        )
    return specs


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _clean(x):
    """nan -> None recursively, so reports stay strict JSON."""
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


@dataclass
class RunLedger:
    run_id: str
    config: dict
    inputs: dict
    seeds: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunLedger":
        return cls(**d)


class Run:
    """A run directory plus its config and ledger."""

    def __init__(self, root: str | Path, config: PipelineConfig, ledger: RunLedger):
        self.root = Path(root)
        self.config = config
        self.ledger = ledger

    # construction

    @classmethod
    def create(cls, root: str | Path, config: PipelineConfig, manifest: str | Path, features: str | Path) -> "Run":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        cfg = config.to_dict()
        # worker count does not change any artifact, so it stays out of the id
        keyed = {k: v for k, v in cfg.items() if k != "jobs"}
        run_id = hashlib.sha256(json.dumps(keyed, sort_keys=True).encode()).hexdigest()[:16]
        inputs = {"manifest": str(Path(manifest).resolve()), "features": str(Path(features).resolve())}
        run = cls(root, config, RunLedger(run_id, cfg, inputs))
        _dump_json(cfg, root / "config.json")
        run.save_ledger()
        return run

    @classmethod
    def open(cls, root: str | Path) -> "Run":
        root = Path(root)
        path = root / "ledger.json"
        if not path.exists():
            raise IncompleteRun(f"{root} has no ledger.json; create the run first")
        ledger = RunLedger.from_dict(json.loads(path.read_text(encoding="utf-8")))
        return cls(root, PipelineConfig.from_dict(ledger.config), ledger)

    def save_ledger(self) -> None:
        _dump_json(self.ledger.to_dict(), self.root / "ledger.json")

    # stage bookkeeping

    def require(self, *stages: str) -> None:
        for stage in stages:
            if self.ledger.stages.get(stage, {}).get("status") != "completed":
                raise IncompleteRun(f"stage {stage!r} has not completed")
            for rel in self.ledger.artifacts.get(stage, []):
                if not (self.root / rel).exists():
                    raise IncompleteRun(f"artifact {rel} of stage {stage!r} is missing")

    def stage(self, name: str):
        return _StageContext(self, name)

    def rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()

    # inputs

    def load_inputs(self) -> tuple[BinaryLabelMatrix, FeatureTable]:
        manifest = load_manifest(self.ledger.inputs["manifest"], LabelSchema.canonical(), allow_missing_labels=True)
        if manifest.schema.n_labels != self.config.n_labels:
            raise InvalidConfig(f"manifest has {manifest.schema.n_labels} labels, config says {self.config.n_labels}")
        truth = binarize_manifest(manifest)
        feats = load_features(self.ledger.inputs["features"])
        if feats.sample_ids != truth.sample_ids:
            if set(feats.sample_ids) != set(truth.sample_ids):
                raise ShapeMismatch("manifest and feature file list different samples")
            feats = FeatureTable(truth.sample_ids, feats.rows(truth.sample_ids), feats.names)
        return truth, feats

    def folds(self) -> FoldAssignment:
        return FoldAssignment.load(self.root / "folds.csv", self.config.k_folds)

    def specs(self) -> list[BaseLearnerSpec]:
        specs = []
        for base in roster(self.config):
            path = self.root / "tuning" / f"{base.model_id}.spec.json"
            specs.append(BaseLearnerSpec(**json.loads(path.read_text(encoding="utf-8"))))
        return specs

    def model_path(self, model_id: str, fold: int) -> Path:
        return self.root / "models" / model_id / f"fold{fold}.json"

    def prediction_path(self, model_id: str, fold: int) -> Path:
        return self.root / "predictions" / model_id / f"fold{fold}.csv"

    def gbdt_params(self) -> GbdtParams:
        c = self.config
        return GbdtParams(c.gbdt_rounds, c.gbdt_max_depth, c.gbdt_eta, c.gbdt_lambda, c.gbdt_gamma, c.gbdt_min_child_weight)


class _StageContext:
    def __init__(self, run: Run, name: str):
        self.run = run
        self.name = name
        self.artifacts: list[str] = []

    def add(self, path: Path) -> Path:
        self.artifacts.append(self.run.rel(path))
        return path

    def __enter__(self):
        self.run.ledger.stages[self.name] = {"status": "running", "started": time.time()}
        self.run.save_ledger()
        return self

    def __exit__(self, exc_type, exc, tb):
        entry = self.run.ledger.stages[self.name]
        entry["finished"] = time.time()
        if exc is None:
            entry["status"] = "completed"
            self.run.ledger.artifacts[self.name] = sorted(self.artifacts)
        else:
            entry["status"] = "failed"
            entry["error"] = f"{exc_type.__name__}: {exc}"
        self.run.save_ledger()
        return False


# --- stages -----------------------------------------------------------------


def stage_split(run: Run) -> FoldAssignment:
    truth, _ = run.load_inputs()
    with run.stage("split") as st:
        seed = derive_seed(run.config.seed, "split")
        run.ledger.seeds["split"] = seed
        fa = stratified_kfold(truth, run.config.k_folds, seed)
        fa.save(st.add(run.root / "folds.csv"))
    return fa


def stage_tune(run: Run) -> list[BaseLearnerSpec]:
    truth, feats = run.load_inputs()
    cfg = run.config
    out = []
    with run.stage("tune") as st:
        for base in roster(cfg):
            path = run.root / "tuning" / f"{base.model_id}.spec.json"
            spec = base
            if cfg.tune:
                seed = derive_seed(cfg.seed, "tune", base.model_id)
                run.ledger.seeds[f"tune/{base.model_id}"] = seed
                spec, best, records = tune_base_learner(
                    base,
                    feats.values,
                    truth,
                    n_trials=cfg.n_trials,
                    max_epochs=cfg.tune_epochs,
                    subset_fraction=cfg.tune_subset_fraction,
                    batch_size=cfg.batch_size,
                    seed=seed,
                    space=SearchSpace(),
                    n_startup_trials=cfg.n_startup_trials,
                    include_pruned=cfg.median_include_pruned,
                )
                log_path = run.root / "tuning" / f"{base.model_id}.trials.jsonl"
                log_path.parent.mkdir(parents=True, exist_ok=True)
                save_trial_log(records, st.add(log_path))
                log.info("%s: best trial %d (%.4f)", base.model_id, best.trial_id, best.final_value)
            _dump_json(dataclasses.asdict(spec), st.add(path))
            out.append(spec)
    return out


def _train_job(args):
    spec, x, truth, view, epochs, batch_size, seed = args
    return train_fold(spec, x, truth, view, epochs, batch_size, seed)


def stage_train(run: Run) -> None:
    run.require("split", "tune")
    truth, feats = run.load_inputs()
    fa = run.folds()
    cfg = run.config
    jobs = []
    for spec in run.specs():
        for fold in range(cfg.k_folds):
            seed = derive_seed(cfg.seed, "train", spec.model_id, fold)
            run.ledger.seeds[f"train/{spec.model_id}/{fold}"] = seed
            jobs.append((spec, feats.values, truth, split_views(fa, fold), cfg.epochs, cfg.batch_size, seed))
    with run.stage("train") as st:
        if cfg.jobs > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                models = list(pool.map(_train_job, jobs))
        else:
            models = [_train_job(j) for j in jobs]
        for i, (job, model) in enumerate(zip(jobs, models)):
            spec, view, fold = job[0], job[3], i % cfg.k_folds
            path = run.model_path(spec.model_id, fold)
            path.parent.mkdir(parents=True, exist_ok=True)
            model.save(st.add(path))
            pred = predict(model, feats.rows(view[1]), view[1])
            pred_path = run.prediction_path(spec.model_id, fold)
            pred_path.parent.mkdir(parents=True, exist_ok=True)
            pred.save_csv(st.add(pred_path))


def load_fold_predictions(run: Run) -> dict[tuple[str, int], PredictionMatrix]:
    preds = {}
    for spec in run.specs():
        for fold in range(run.config.k_folds):
            preds[(spec.model_id, fold)] = PredictionMatrix.load_csv(run.prediction_path(spec.model_id, fold), spec.model_id)
    return preds


def stage_oof(run: Run) -> OofMatrix:
    run.require("split", "train")
    truth, _ = run.load_inputs()
    fa = run.folds()
    with run.stage("oof") as st:
        oof = assemble_oof(load_fold_predictions(run), fa, truth.labels)
        oof.save_csv(st.add(run.root / "oof.csv"))
        for model_id in oof.model_ids:
            block = oof.model_block(model_id, truth.labels)
            report = macro_report(block, truth.take(block.sample_ids), run.config.threshold)
            fold_aucs = [BaseLearnerModel.load(run.model_path(model_id, k)).best_macro_auc for k in range(fa.k)]
            extra = {
                "model_id": model_id,
                "split": "oof",
                "fold_best_macro_auc": fold_aucs,
                "fold_macro_auc_mean": float(np.mean(fold_aucs)),
                "fold_macro_auc_sd": float(np.std(fold_aucs, ddof=1)) if len(fold_aucs) > 1 else 0.0,
            }
            _save_report(dataclasses.replace(report, extra=extra), st.add(run.root / "reports" / f"{model_id}.json"))
    return oof


def _save_report(report: MetricsReport, path: Path) -> None:
    _dump_json(_clean(report.to_dict()), path)


def _save_holdout(fit_ids: Sequence[str], eval_ids: Sequence[str], path: Path) -> None:
    part = {s: "fit" for s in fit_ids} | {s: "eval" for s in eval_ids}
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([SAMPLE_ID, "part"])
        for sid in sorted(part):
            writer.writerow([sid, part[sid]])


def stage_stack(run: Run) -> GbdtMetaLearner:
    run.require("oof")
    truth, _ = run.load_inputs()
    cfg = run.config
    oof = OofMatrix.load_csv(run.root / "oof.csv")
    with run.stage("stack") as st:
        seed = derive_seed(cfg.seed, "holdout")
        run.ledger.seeds["holdout"] = seed
        fit_part, eval_part = holdout_split(oof, truth, cfg.oof_holdout_fraction, seed)
        _save_holdout(fit_part.oof.sample_ids, eval_part.oof.sample_ids, st.add(run.root / "holdout.csv"))
        meta_seed = derive_seed(cfg.seed, "meta")
        run.ledger.seeds["meta"] = meta_seed
        meta = fit_meta(fit_part.oof, fit_part.truth, run.gbdt_params(), meta_seed)
        meta.save(st.add(run.root / "meta.json"))
        for label in meta.labels:
            try:
                ranked = feature_importance(meta, label)
            except ValidationError:
                continue
            path = run.root / "importance" / f"{label}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_importance(ranked, st.add(path), cfg.top_k_importance)
    return meta


def stage_eval(run: Run) -> MetricsReport:
    """Score the meta-learner and every single model on the OOF hold-out rows."""
    run.require("oof", "stack")
    truth, _ = run.load_inputs()
    cfg = run.config
    oof = OofMatrix.load_csv(run.root / "oof.csv")
    meta = GbdtMetaLearner.load(run.root / "meta.json")
    eval_ids = _read_holdout(run.root / "holdout.csv")["eval"]
    eval_oof = oof.take(eval_ids)
    eval_truth = truth.take(eval_ids)
    with run.stage("eval") as st:
        single_eval = {}
        for model_id in oof.model_ids:
            single = macro_report(eval_oof.model_block(model_id, truth.labels), eval_truth, cfg.threshold)
            single_eval[model_id] = _clean(single.macro_auc)
        pred = predict_meta(meta, eval_oof)
        report = macro_report(pred, eval_truth, cfg.threshold)
        report = dataclasses.replace(
            report,
            extra={"model_id": "meta", "split": "oof_holdout", "single_model_holdout_macro_auc": single_eval},
        )
        _save_report(report, st.add(run.root / "reports" / "meta.json"))
        _write_rocs(pred, eval_truth, run.root / "roc" / "meta", st)
    return report


def _write_rocs(pred: PredictionMatrix, truth: BinaryLabelMatrix, out_dir: Path, st: _StageContext | None = None) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for j, label in enumerate(truth.labels):
        col = truth.values[:, j]
        if label in truth.excluded or col.sum() in (0, col.size):
            continue
        path = out_dir / f"{label}.csv"
        roc_curve(pred.probs[:, j], col).save_csv(path)
        paths.append(st.add(path) if st is not None else path)
    return paths


def _read_holdout(path: Path) -> dict[str, list[str]]:
    parts: dict[str, list[str]] = {"fit": [], "eval": []}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for sid, part in reader:
            parts[part].append(sid)
    return parts


def report_schema() -> dict:
    text = resources.files("retinastack.data").joinpath("report_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def stage_report(run: Run) -> dict:
    run.require("tune", "oof", "stack", "eval")
    cfg = run.config
    specs = run.specs()
    blocks = []
    for spec in specs:
        r = json.loads((run.root / "reports" / f"{spec.model_id}.json").read_text(encoding="utf-8"))
        blocks.append(
            {
                "model_id": spec.model_id,
                "kind": "single",
                "evaluated_on": "oof",
                "macro_f1": r["macro"]["f1"],
                "macro_auc": r["macro"]["auc"],
                "macro_precision": r["macro"]["precision"],
                "macro_recall": r["macro"]["recall"],
                "fold_macro_auc_mean": r["fold_macro_auc_mean"],
                "fold_macro_auc_sd": r["fold_macro_auc_sd"],
            }
        )
    meta_r = json.loads((run.root / "reports" / "meta.json").read_text(encoding="utf-8"))
    blocks.append(
        {
            "model_id": "meta",
            "kind": "ensemble",
            "evaluated_on": "oof_holdout",
            "macro_f1": meta_r["macro"]["f1"],
            "macro_auc": meta_r["macro"]["auc"],
            "macro_precision": meta_r["macro"]["precision"],
            "macro_recall": meta_r["macro"]["recall"],
            "fold_macro_auc_mean": None,
            "fold_macro_auc_sd": None,
        }
    )
    importance = {}
    for label in LabelSchema.canonical().labels:
        path = run.root / "importance" / f"{label}.csv"
        if path.exists():
            with path.open(newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            importance[label] = [{"feature": r["feature"], "gain_share": float(r["gain_share"])} for r in rows[: cfg.top_k_importance]]
    report = {
        "format": "retinastack.report/1",
        "version": __version__,
        "run_id": run.ledger.run_id,
        "config": cfg.to_dict(),
        "hyperparameters": [
            {
                "model_id": s.model_id,
                "hidden_units": s.hidden_units,
                "learning_rate": s.learning_rate,
                "weight_decay": s.weight_decay,
                "dropout_rate": s.dropout_rate,
            }
            for s in specs
        ],
        "metric_blocks": blocks,
        "ensemble_holdout": {
            "per_class": meta_r["per_class"],
            "skipped_labels": meta_r["skipped_labels"],
            "single_model_holdout_macro_auc": meta_r["single_model_holdout_macro_auc"],
        },
        "importance": importance,
    }
    report = _clean(report)
    jsonschema.validate(report, report_schema())
    with run.stage("report") as st:
        _dump_json(report, st.add(run.root / "report.json"))
    return report


def cmd_pipeline(config: PipelineConfig, manifest: str | Path, features: str | Path, out_dir: str | Path) -> Run:
    run = Run.create(out_dir, config, manifest, features)
    for stage in (stage_split, stage_tune, stage_train, stage_oof, stage_stack, stage_eval, stage_report):
        log.info("stage %s", stage.__name__.removeprefix("stage_"))
        stage(run)
    return run


# --- zero-shot external evaluation -------------------------------------------


def _mean_fold_probs(run: Run, model_id: str, x: np.ndarray) -> np.ndarray:
    probs = [predict(BaseLearnerModel.load(run.model_path(model_id, k)), x).probs for k in range(run.config.k_folds)]
    return np.mean(probs, axis=0)


def external_predictions(run: Run, model: str, features: FeatureTable) -> PredictionMatrix:
    """Zero-shot predictions of one base model or the meta-learner.

    A base model's prediction is the mean over its K fold models; the
    meta-learner consumes those means for every base model.
    """
    run.require("train")
    specs = {s.model_id: s for s in run.specs()}
    if model == "meta":
        run.require("stack")
        meta = GbdtMetaLearner.load(run.root / "meta.json")
        cols = []
        for model_id in dict.fromkeys(name.split(":", 1)[0] for name in meta.feature_names):
            cols.append(_mean_fold_probs(run, model_id, features.values))
        return predict_meta(meta, np.concatenate(cols, axis=1), features.sample_ids)
    if model not in specs:
        raise InvalidConfig(f"unknown model {model!r}; choose 'meta' or one of {sorted(specs)}")
    labels = BaseLearnerModel.load(run.model_path(model, 0)).labels
    return PredictionMatrix(features.sample_ids, _mean_fold_probs(run, model, features.values), model, labels)


def external_truth(manifest_path: str | Path, labels: Sequence[str], mapping: LabelMapping | None) -> BinaryLabelMatrix:
    schema = LabelSchema.canonical().subset(labels)
    if mapping is not None:
        return map_ground_truth(load_external_manifest(manifest_path), mapping, schema)
    m = load_manifest(manifest_path, schema, allow_missing_labels=True)
    present = binarize_manifest(m)
    values = np.zeros((len(m), len(schema.labels)), dtype=np.int8)
    for j, lab in enumerate(schema.labels):
        if lab in present.labels:
            values[:, j] = present.column(lab)
    excluded = tuple(lab for lab in schema.labels if lab not in present.labels)
    return BinaryLabelMatrix(m.sample_ids, values, schema.labels, excluded)


def _run_labels(run: Run) -> tuple[str, ...]:
    return BaseLearnerModel.load(run.model_path(run.specs()[0].model_id, 0)).labels


def cmd_evaluate_external(
    run_dir: str | Path,
    model: str,
    features_path: str | Path,
    manifest_path: str | Path,
    out_dir: str | Path,
    mapping: LabelMapping | None = None,
    threshold: float | None = None,
) -> MetricsReport:
    """Score a trained run on an external set without any refitting."""
    run = Run.open(run_dir)
    feats = load_features(features_path)
    if len(feats) == 0:
        raise ValidationError("external feature set is empty")
    pred_labels = _run_labels(run)
    truth = external_truth(manifest_path, pred_labels, mapping)
    if len(truth) == 0:
        raise ValidationError("external manifest is empty")
    if set(truth.sample_ids) != set(feats.sample_ids):
        raise ShapeMismatch("external manifest and features list different samples")
    feats = FeatureTable(truth.sample_ids, feats.rows(truth.sample_ids), feats.names)
    expected_dim = BaseLearnerModel.load(run.model_path(run.specs()[0].model_id, 0)).input_dim
    if feats.values.shape[1] != expected_dim:
        raise DimensionMismatch(f"run expects {expected_dim} features, got {feats.values.shape[1]}")
    pred = external_predictions(run, model, feats)
    report = macro_report(pred, truth, run.config.threshold if threshold is None else threshold)
    report = dataclasses.replace(report, extra={"model_id": model, "split": "external"})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _save_report(report, out / "report.json")
    _write_rocs(pred, truth, out / "roc")
    return report

