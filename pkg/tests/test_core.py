import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retinastack.core import (
    CANONICAL_LABELS,
    FeatureTable,
    LabelSchema,
    Manifest,
    PipelineConfig,
    binarize_manifest,
    load_features,
    load_manifest,
    write_features,
    write_manifest,
)
from retinastack.errors import (
    DuplicateSampleId,
    InvalidConfig,
    MissingColumn,
    OutOfRangeValue,
    ParseError,
    ValidationError,
)

HEADER = "sample_id,dr_grade," + ",".join(f"is_{lab}" for lab in CANONICAL_LABELS if lab != "dr")


def write_rows(path, rows, header=HEADER):
    path.write_text(header + "\n" + "".join(r + "\n" for r in rows), encoding="utf-8")
    return path


class TestLabelSchema:
    def test_canonical_order_and_grading(self):
        schema = LabelSchema.canonical()
        assert schema.labels == ("amd", "aon", "crp", "dm", "dme", "dr", "em", "gc", "htr", "pm", "rvo")
        assert list(schema.labels) == sorted(schema.labels)
        graded = [lab for lab in schema.labels if schema.is_graded(lab)]
        assert graded == ["dr"]
        assert schema.max_values[schema.index("dr")] == 4
        assert schema.columns[schema.index("dr")] == "dr_grade"
        assert schema.columns[schema.index("gc")] == "is_gc"

    def test_duplicate_labels_rejected(self):
        with pytest.raises(ValidationError):
            LabelSchema.binary(["a", "a"])

    def test_subset_keeps_schema_order(self):
        sub = LabelSchema.canonical().subset(["rvo", "amd", "dr"])
        assert sub.labels == ("amd", "dr", "rvo")
        assert sub.is_graded("dr")


class TestLoadManifest:
    def test_well_formed(self, tmp_path):
        rows = [
            "a,0," + ",".join("0" * 10),
            "b,2," + ",".join("1" + "0" * 9),
            "c,4," + ",".join("0" * 9 + "1"),
        ]
        m = load_manifest(write_rows(tmp_path / "m.csv", rows))
        assert len(m) == 3
        assert m.sample_ids == ("a", "b", "c")
        np.testing.assert_array_equal(m.values[:, m.schema.index("dr")], [0, 2, 4])
        assert m.values[1, m.schema.index("amd")] == 1
        assert m.values[2, m.schema.index("rvo")] == 1

    def test_grade_out_of_range(self, tmp_path):
        path = write_rows(tmp_path / "m.csv", ["a,5," + ",".join("0" * 10)])
        with pytest.raises(OutOfRangeValue) as info:
            load_manifest(path)
        assert info.value.label == "dr"

    def test_binary_out_of_range(self, tmp_path):
        path = write_rows(tmp_path / "m.csv", ["a,0,2," + ",".join("0" * 9)])
        with pytest.raises(OutOfRangeValue):
            load_manifest(path)

    def test_duplicate_id(self, tmp_path):
        row = ",0," + ",".join("0" * 10)
        path = write_rows(tmp_path / "m.csv", ["a" + row, "b" + row, "a" + row])
        with pytest.raises(DuplicateSampleId):
            load_manifest(path)

    def test_missing_column(self, tmp_path):
        header = HEADER.replace(",is_gc", "")
        path = write_rows(tmp_path / "m.csv", ["a,0," + ",".join("0" * 9)], header)
        with pytest.raises(MissingColumn):
            load_manifest(path)
        m = load_manifest(path, allow_missing_labels=True)
        assert "gc" not in m.schema.labels
        assert m.schema.n_labels == 10

    def test_parse_error_reports_line(self, tmp_path):
        path = write_rows(tmp_path / "m.csv", ["a,0," + ",".join("0" * 10), "b,x," + ",".join("0" * 10)])
        with pytest.raises(ParseError) as info:
            load_manifest(path)
        assert info.value.line == 3

    def test_extra_column_warns(self, tmp_path, caplog):
        path = write_rows(tmp_path / "m.csv", ["a,0," + ",".join("0" * 10) + ",left"], HEADER + ",eye")
        m = load_manifest(path)
        assert len(m) == 1
        assert "eye" in caplog.text

    def test_round_trip(self, tmp_path, rng):
        schema = LabelSchema.canonical()
        values = rng.integers(0, 2, size=(20, 11))
        values[:, schema.index("dr")] = rng.integers(0, 5, size=20)
        m = Manifest(tuple(f"id{i}" for i in range(20)), values, schema)
        write_manifest(m, tmp_path / "m.csv")
        assert load_manifest(tmp_path / "m.csv") == m


class TestBinarize:
    def test_dr_grades(self):
        schema = LabelSchema.canonical()
        values = np.zeros((3, 11), dtype=np.int64)
        values[1, schema.index("dr")] = 3
        values[2, schema.index("dr")] = 1
        b = binarize_manifest(Manifest(("a", "b", "c"), values, schema))
        np.testing.assert_array_equal(b.column("dr"), [0, 1, 1])
        np.testing.assert_array_equal(b.values[0], np.zeros(11))
        assert b.labels == schema.labels

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
    def test_binary_output_and_idempotence(self, rows):
        schema = LabelSchema.canonical().subset(["amd", "dr", "gc"])
        values = np.array([[a, d, g] for d, a, g in rows])
        m = Manifest(tuple(str(i) for i in range(len(rows))), values, schema)
        b = binarize_manifest(m)
        assert set(np.unique(b.values)) <= {0, 1}
        np.testing.assert_array_equal(b.values, (values >= 1).astype(np.int8))
        assert b.sample_ids == m.sample_ids
        again = binarize_manifest(Manifest(m.sample_ids, b.values.astype(np.int64), schema))
        assert again == b


class TestFeatures:
    def test_round_trip_exact(self, tmp_path, rng):
        table = FeatureTable(("a", "b"), rng.normal(size=(2, 3)), ("f0", "f1", "f2"))
        write_features(table, tmp_path / "f.csv")
        back = load_features(tmp_path / "f.csv")
        assert back.sample_ids == table.sample_ids
        np.testing.assert_array_equal(back.values, table.values)
        np.testing.assert_array_equal(back.rows(["b"]), table.values[[1]])


class TestPipelineConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert (cfg.k_folds, cfg.n_labels, cfg.n_models, cfg.epochs, cfg.batch_size) == (5, 11, 6, 10, 32)
        assert cfg.oof_holdout_fraction == 0.25

    @pytest.mark.parametrize(
        "change", [{"k_folds": 1}, {"oof_holdout_fraction": 0.0}, {"oof_holdout_fraction": 1.0}, {"n_models": 0}, {"top_k_importance": 11}]
    )
    def test_invalid(self, change):
        with pytest.raises(InvalidConfig):
            PipelineConfig(**change)

    def test_json_with_overrides(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"k_folds": 3, "seed": 7}))
        cfg = PipelineConfig.from_json(path, seed=9, threshold=None)
        assert cfg.k_folds == 3 and cfg.seed == 9 and cfg.threshold == 0.5
        assert PipelineConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(InvalidConfig):
            PipelineConfig.from_dict({"folds": 3})
