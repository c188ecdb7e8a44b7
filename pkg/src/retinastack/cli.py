"""Command-line entry point.

Exit codes: 0 on success, 2 for invalid input or configuration, 3 when a
pipeline stage fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .base_trainer import BaseLearnerModel
from .core import LabelSchema, PipelineConfig, binarize_manifest, load_features, load_manifest
from .errors import StageError, ValidationError
from .explain import METHODS, integrated_gradients, occlusion, saliency
from .pipeline import (
    Run,
    cmd_evaluate_external,
    cmd_pipeline,
    stage_eval,
    stage_oof,
    stage_report,
    stage_split,
    stage_stack,
    stage_train,
    stage_tune,
)
from .simulate import SyntheticBenchmarkSpec, cmd_simulate
from .taxonomy import load_mapping, rfmid_mapping

log = logging.getLogger("retinastack")

CONFIG_ENV = "RETINASTACK_CONFIG"


def load_config(args) -> PipelineConfig:
    overrides = {"seed": args.seed, "threshold": args.threshold, "jobs": args.jobs}
    if getattr(args, "no_tune", False):
        overrides["tune"] = False
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        return PipelineConfig.from_json(path, **overrides)
    return PipelineConfig().replace(**{k: v for k, v in overrides.items() if v is not None})


def _open_run(args) -> Run:
    run = Run.open(args.run)
    if args.jobs is not None:
        run.config = run.config.replace(jobs=args.jobs)
    return run


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# --- handlers ----------------------------------------------------------------


def do_validate(args) -> None:
    schema = LabelSchema.canonical()
    manifest = load_manifest(args.manifest, schema, allow_missing_labels=args.allow_missing_labels)
    truth = binarize_manifest(manifest)
    summary = {
        "n_samples": len(manifest),
        "labels": list(manifest.schema.labels),
        "positives": {lab: int(truth.values[:, j].sum()) for j, lab in enumerate(truth.labels)},
    }
    if args.features:
        feats = load_features(args.features)
        if set(feats.sample_ids) != set(manifest.sample_ids):
            raise ValidationError("manifest and feature file list different samples")
        summary["n_features"] = len(feats.names)
    load_config(args)
    _print(summary)


def do_simulate(args) -> None:
    spec = SyntheticBenchmarkSpec(
        n_samples=args.n_samples,
        n_labels=args.n_labels,
        features_per_label=args.features_per_label,
        n_distractors=args.n_distractors,
        cooccurrence=args.cooccurrence,
    )
    manifest, features = cmd_simulate(spec, args.seed if args.seed is not None else 0, args.out)
    _print({"manifest": str(manifest), "features": str(features)})


def do_split(args) -> None:
    run = Run.create(args.run, load_config(args), args.manifest, args.features)
    fa = stage_split(run)
    _print({"run_id": run.ledger.run_id, "fold_sizes": fa.fold_sizes().tolist()})


def do_tune(args) -> None:
    specs = stage_tune(_open_run(args))
    _print({s.model_id: {"learning_rate": s.learning_rate, "weight_decay": s.weight_decay, "dropout_rate": s.dropout_rate} for s in specs})


def do_train(args) -> None:
    stage_train(_open_run(args))


def do_oof(args) -> None:
    oof = stage_oof(_open_run(args))
    _print({"n_samples": len(oof.sample_ids), "width": len(oof.feature_names)})


def do_stack(args) -> None:
    meta = stage_stack(_open_run(args))
    _print({"labels": list(meta.labels), "degenerate_labels": list(meta.degenerate_labels)})


def do_eval(args) -> None:
    report = stage_eval(_open_run(args))
    _print({"meta_macro_auc": report.macro_auc, **report.extra})


def do_report(args) -> None:
    report = stage_report(_open_run(args))
    _print({b["model_id"]: b["macro_auc"] for b in report["metric_blocks"]})


def do_pipeline(args) -> None:
    run = cmd_pipeline(load_config(args), args.manifest, args.features, args.out)
    report = json.loads((run.root / "report.json").read_text(encoding="utf-8"))
    _print({b["model_id"]: b["macro_auc"] for b in report["metric_blocks"]})


def do_eval_external(args) -> None:
    mapping = None
    if args.mapping:
        schema = LabelSchema.canonical()
        mapping = rfmid_mapping() if args.mapping == "rfmid" else load_mapping(args.mapping, schema)
    report = cmd_evaluate_external(args.run, args.model, args.features, args.manifest, args.out, mapping, args.threshold)
    _print(report.to_dict()["macro"] | {"excluded_labels": list(report.excluded_labels)})


def do_explain(args) -> None:
    run = Run.open(args.run)
    model = BaseLearnerModel.load(run.model_path(args.model, args.fold))
    feats = load_features(args.features)
    if args.sample not in feats.index:
        raise ValidationError(f"sample {args.sample!r} not in {args.features}")
    x = feats.rows([args.sample])[0]
    methods = METHODS if args.method == "all" else (args.method,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for method in methods:
        if method == "saliency":
            amap = saliency(model, x, args.label, args.sample)
        elif method == "integrated_gradients":
            baseline = model.feature_mean if args.baseline == "mean" else None
            amap = integrated_gradients(model, x, baseline, args.steps, args.label, args.sample)
        else:
            amap = occlusion(model, x, args.label, sample_id=args.sample)
        path = out / f"{args.sample}_{amap.label}_{method}.csv"
        amap.save_csv(path, feats.names)
        written.append(str(path))
    _print(written)


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--threshold", type=float, help="decision threshold for F1/precision/recall")
    common.add_argument("--jobs", type=int, help="concurrent (model, fold) training jobs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="retinastack", description="Multilabel stacking pipeline: stratified folds, base learners, GBDT meta-learner.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(handler=handler)
        return p

    p = add("validate", do_validate, "check a manifest (and optionally a feature file) and the config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features")
    p.add_argument("--allow-missing-labels", action="store_true")

    p = add("simulate", do_simulate, "write a synthetic manifest and feature file")
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, default=5000)
    p.add_argument("--n-labels", type=int, default=11)
    p.add_argument("--features-per-label", type=int, default=4)
    p.add_argument("--n-distractors", type=int, default=12)
    p.add_argument("--cooccurrence", type=float, default=0.3)

    p = add("split", do_split, "create a run directory and assign folds")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--no-tune", action="store_true", help="use the bundled reference hyperparameters")

    for name, handler, help_ in (
        ("tune", do_tune, "hyperparameter search per base model"),
        ("train", do_train, "train every (model, fold) pair"),
        ("oof", do_oof, "assemble out-of-fold predictions"),
        ("stack", do_stack, "hold-out split and meta-learner fit"),
        ("eval", do_eval, "score the meta-learner and singles on the hold-out"),
        ("report", do_report, "write the consolidated report"),
    ):
        add(name, handler, help_).add_argument("--run", required=True)

    p = add("pipeline", do_pipeline, "run every stage end to end")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-tune", action="store_true", help="use the bundled reference hyperparameters")

    p = add("eval-external", do_eval_external, "zero-shot evaluation on an external set")
    p.add_argument("--run", required=True)
    p.add_argument("--model", default="meta", help="'meta' or a base model id")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mapping", help="'rfmid' for the bundled preset, or a mapping JSON path")
    p.add_argument("--out", required=True)

    p = add("explain", do_explain, "attributions for one sample and label")
    p.add_argument("--run", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--features", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--method", choices=(*METHODS, "all"), default="all")
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--baseline", choices=("zeros", "mean"), default="zeros", help="integrated-gradients baseline")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.handler(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
