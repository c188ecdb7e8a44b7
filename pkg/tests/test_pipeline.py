import csv
import json
import shutil

import jsonschema
import numpy as np
import pytest

from retinastack.core import PipelineConfig, load_features, write_features, FeatureTable
from retinastack.errors import DimensionMismatch, IncompleteRun, LeakageDetected, ValidationError
from retinastack.pipeline import (
    Run,
    cmd_evaluate_external,
    cmd_pipeline,
    derive_seed,
    report_schema,
    roster,
    stage_oof,
    stage_split,
    stage_train,
    stage_tune,
    reference_presets,
)
from retinastack.simulate import SyntheticBenchmarkSpec, cmd_simulate
from retinastack.taxonomy import rfmid_mapping

SMALL = PipelineConfig(k_folds=3, epochs=2, n_trials=4, tune_epochs=2, tune_subset_fraction=0.5, gbdt_rounds=10, seed=11)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return cmd_simulate(SyntheticBenchmarkSpec(n_samples=300), 4, root)


@pytest.fixture(scope="module")
def run(data, tmp_path_factory):
    return cmd_pipeline(SMALL, *data, tmp_path_factory.mktemp("run") / "run")


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name != "ledger.json"}


class TestSeeds:
    def test_derive_seed(self):
        assert derive_seed(0, "split") != derive_seed(0, "tune")
        assert derive_seed(1, "split") == derive_seed(0, "split") ^ 1
        assert 0 <= derive_seed(2**64 - 1, "x") < 2**64

    def test_roster_and_presets(self):
        specs = roster(PipelineConfig())
        assert len(specs) == 6 and len({s.model_id for s in specs}) == 6
        assert len({s.feature_subset_seed for s in specs}) == 6
        presets = reference_presets()
        assert [p["architecture"] for p in presets][:2] == ["ResNet50", "SwinV2-Base"]
        assert all(1e-6 <= p["learning_rate"] <= 3e-4 and 0 <= p["dropout_rate"] <= 0.6 for p in presets)


class TestFullRun:
    def test_artifacts(self, run):
        root = run.root
        for name in ("config.json", "ledger.json", "folds.csv", "oof.csv", "holdout.csv", "meta.json", "report.json"):
            assert (root / name).exists()
        for stage, paths in run.ledger.artifacts.items():
            assert all((root / p).exists() for p in paths), stage
        assert all(entry["status"] == "completed" for entry in run.ledger.stages.values())
        assert set(run.ledger.stages) == {"split", "tune", "train", "oof", "stack", "eval", "report"}

    def test_oof_width(self, run):
        with (run.root / "oof.csv").open() as fh:
            header = next(csv.reader(fh))
        assert len(header) - 1 == 66
        assert header[1] == "linear_a:amd"

    def test_report(self, run):
        report = json.loads((run.root / "report.json").read_text())
        jsonschema.validate(report, report_schema())
        assert len(report["metric_blocks"]) == SMALL.n_models + 1
        assert report["metric_blocks"][-1]["model_id"] == "meta"
        assert all(len(v) <= 10 for v in report["importance"].values())
        assert report["importance"]

    def test_rerun_byte_identical(self, run, data, tmp_path):
        again = cmd_pipeline(SMALL, *data, tmp_path / "again")
        assert tree_bytes(again.root) == tree_bytes(run.root)

    def test_stage_order_enforced(self, data, tmp_path):
        fresh = Run.create(tmp_path / "r", SMALL, *data)
        with pytest.raises(IncompleteRun):
            stage_train(fresh)
        with pytest.raises(IncompleteRun):
            Run.open(tmp_path / "missing")

    def test_leakage_rejected(self, run, tmp_path):
        copy = tmp_path / "copy"
        shutil.copytree(run.root, copy)
        corrupt = Run.open(copy)
        fa = corrupt.folds()
        path = corrupt.prediction_path("linear_a", 0)
        foreign = next(s for s, f in zip(fa.sample_ids, fa.fold_of) if f != 0)
        lines = path.read_text().splitlines()
        lines.append(foreign + lines[1][lines[1].index(","):])
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(LeakageDetected):
            stage_oof(corrupt)
        assert json.loads((copy / "ledger.json").read_text())["stages"]["oof"]["status"] == "failed"

    def test_missing_artifact_detected(self, run, tmp_path):
        copy = tmp_path / "copy"
        shutil.copytree(run.root, copy)
        (copy / "folds.csv").unlink()
        with pytest.raises(IncompleteRun):
            Run.open(copy).require("split")


class TestMinimalRun:
    def test_two_labels_one_model(self, tmp_path):
        spec = SyntheticBenchmarkSpec(n_samples=40, n_labels=2, prevalence=(0.4, 0.5))
        manifest, features = cmd_simulate(spec, 0, tmp_path / "d")
        cfg = PipelineConfig(k_folds=2, n_labels=2, n_models=1, epochs=1, n_trials=2, tune_epochs=1, tune_subset_fraction=1.0, gbdt_rounds=3)
        run = cmd_pipeline(cfg, manifest, features, tmp_path / "r")
        report = json.loads((run.root / "report.json").read_text())
        assert len(report["metric_blocks"]) == 2
        for paths in run.ledger.artifacts.values():
            assert all((run.root / p).exists() for p in paths)


class TestExternal:
    def test_binary_dr(self, run, tmp_path):
        manifest, features = cmd_simulate(SyntheticBenchmarkSpec(n_samples=120), 9, tmp_path / "ext")
        rows = list(csv.DictReader(manifest.open()))
        dr_only = tmp_path / "dr.csv"
        dr_only.write_text("sample_id,dr_grade\n" + "".join(f"{r['sample_id']},{r['dr_grade']}\n" for r in rows))
        report = cmd_evaluate_external(run.root, "meta", features, dr_only, tmp_path / "out")
        assert list(report.per_class) == ["dr"]
        assert [p.name for p in (tmp_path / "out" / "roc").iterdir()] == ["dr.csv"]
        assert (tmp_path / "out" / "report.json").exists()

    def test_rfmid_mapped(self, run, tmp_path, rng):
        _, features = cmd_simulate(SyntheticBenchmarkSpec(n_samples=150), 10, tmp_path / "ext")
        ids = load_features(features).sample_ids
        sources = rfmid_mapping().source_labels
        with (tmp_path / "rf.csv").open("w") as fh:
            fh.write("sample_id," + ",".join(sources) + "\n")
            for sid in ids:
                fh.write(sid + "," + ",".join(str(int(v)) for v in rng.random(len(sources)) < 0.1) + "\n")
        report = cmd_evaluate_external(run.root, "linear_b", features, tmp_path / "rf.csv", tmp_path / "out", rfmid_mapping())
        assert report.excluded_labels == ("dm", "gc", "htr")
        assert len(report.per_class) == 8
        assert not set(report.per_class) & set(report.excluded_labels)

    def test_empty_set(self, run, data, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text(data[1].read_text().splitlines()[0] + "\n")
        with pytest.raises(ValidationError):
            cmd_evaluate_external(run.root, "meta", empty, data[0], tmp_path / "out")
        assert not (tmp_path / "out").exists()

    def test_dimension_mismatch(self, run, data, tmp_path):
        table = load_features(data[1])
        narrow = tmp_path / "narrow.csv"
        write_features(FeatureTable(table.sample_ids, table.values[:, :-1], table.names[:-1]), narrow)
        with pytest.raises(DimensionMismatch):
            cmd_evaluate_external(run.root, "meta", narrow, data[0], tmp_path / "out")
