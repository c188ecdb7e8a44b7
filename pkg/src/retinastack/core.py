"""Label schema, manifest ingestion and pipeline configuration."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateSampleId,
    InvalidConfig,
    MissingColumn,
    OutOfRangeValue,
    ParseError,
    ShapeMismatch,
    ValidationError,
)

log = logging.getLogger(__name__)

SAMPLE_ID = "sample_id"

CANONICAL_LABELS = ("amd", "aon", "crp", "dm", "dme", "dr", "em", "gc", "htr", "pm", "rvo")


@dataclass(frozen=True)
class LabelSchema:
    """Ordered label identifiers with their value ranges.

    ``max_values[i] == 1`` marks a binary label; anything larger is a graded
    label taking integer values in ``[0, max_values[i]]``. ``columns`` holds
    the manifest header name used for each label.
    """

    labels: tuple[str, ...]
    max_values: tuple[int, ...]
    columns: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.labels) == len(self.max_values) == len(self.columns)):
            raise ValidationError("labels, max_values and columns must have equal length")
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError("label identifiers must be unique")
        if len(set(self.columns)) != len(self.columns) or SAMPLE_ID in self.columns:
            raise ValidationError("column names must be unique and differ from sample_id")
        if any(m < 1 for m in self.max_values):
            raise ValidationError("max value of every label must be >= 1")

    @classmethod
    def canonical(cls) -> "LabelSchema":
        max_values = tuple(4 if lab == "dr" else 1 for lab in CANONICAL_LABELS)
        return cls(CANONICAL_LABELS, max_values, tuple(default_column(lab, m) for lab, m in zip(CANONICAL_LABELS, max_values)))

    @classmethod
    def binary(cls, labels: Sequence[str], columns: Sequence[str] | None = None) -> "LabelSchema":
        """All-binary schema, e.g. an external taxonomy whose columns are the label names."""
        labels = tuple(labels)
        return cls(labels, (1,) * len(labels), tuple(columns) if columns is not None else labels)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown label {label!r}") from None

    def is_graded(self, label: str) -> bool:
        return self.max_values[self.index(label)] > 1

    def subset(self, labels: Iterable[str]) -> "LabelSchema":
        """Sub-schema keeping schema order, whatever order ``labels`` arrive in."""
        wanted = set(labels)
        idx = [i for i, lab in enumerate(self.labels) if lab in wanted]
        return LabelSchema(
            tuple(self.labels[i] for i in idx),
            tuple(self.max_values[i] for i in idx),
            tuple(self.columns[i] for i in idx),
        )


def default_column(label: str, max_value: int) -> str:
    return f"{label}_grade" if max_value > 1 else f"is_{label}"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Manifest:
    sample_ids: tuple[str, ...]
    values: np.ndarray  # (n_samples, n_labels) int64, schema column order
    schema: LabelSchema

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int64)
        if values.shape != (len(self.sample_ids), self.schema.n_labels):
            raise ShapeMismatch(f"values shape {values.shape} does not match manifest")
        object.__setattr__(self, "values", _frozen(values))

    def __len__(self):
        return len(self.sample_ids)

    def __eq__(self, other):
        if not isinstance(other, Manifest):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.sample_ids == other.sample_ids
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class BinaryLabelMatrix:
    """0/1 ground truth in schema column order.

    ``excluded`` lists labels with no usable ground truth (for instance
    schema labels an external taxonomy does not cover); metrics skip them.
    """

    sample_ids: tuple[str, ...]
    values: np.ndarray
    labels: tuple[str, ...]
    excluded: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int8)
        if values.shape != (len(self.sample_ids), len(self.labels)):
            raise ShapeMismatch(f"values shape {values.shape} does not match matrix")
        if not np.isin(values, (0, 1)).all():
            raise ValueError("binary label matrix must contain only 0 and 1")
        object.__setattr__(self, "values", _frozen(values))

    def __len__(self):
        return len(self.sample_ids)

    def __eq__(self, other):
        if not isinstance(other, BinaryLabelMatrix):
            return NotImplemented
        return (
            self.sample_ids == other.sample_ids
            and self.labels == other.labels
            and self.excluded == other.excluded
            and np.array_equal(self.values, other.values)
        )

    def column(self, label: str) -> np.ndarray:
        return self.values[:, self.labels.index(label)]

    def take(self, sample_ids: Sequence[str]) -> "BinaryLabelMatrix":
        pos = {sid: i for i, sid in enumerate(self.sample_ids)}
        rows = [pos[s] for s in sample_ids]
        return BinaryLabelMatrix(tuple(sample_ids), self.values[rows], self.labels, self.excluded)


def load_manifest(
    path: str | Path,
    schema: LabelSchema | None = None,
    *,
    allow_missing_labels: bool = False,
    id_column: str = SAMPLE_ID,
) -> Manifest:
    """Read and validate a ``sample_id,<label columns>`` CSV file.

    With ``allow_missing_labels`` the returned manifest carries the
    sub-schema of labels whose columns are present (external evaluation sets
    usually annotate only some diseases).
    """
    schema = schema or LabelSchema.canonical()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "empty file") from None
        header = [h.strip() for h in header]
        if id_column not in header:
            raise MissingColumn(id_column)
        present = [c for c in schema.columns if c in header]
        missing = [c for c in schema.columns if c not in header]
        if missing:
            if not allow_missing_labels or not present:
                raise MissingColumn(missing[0])
            schema = schema.subset(lab for lab, c in zip(schema.labels, schema.columns) if c in header)
        extra = [c for c in header if c != id_column and c not in schema.columns]
        if extra:
            log.warning("%s: ignoring unknown columns %s", path, ", ".join(extra))

        id_pos = header.index(id_column)
        col_pos = [header.index(c) for c in schema.columns]
        seen: set[str] = set()
        ids: list[str] = []
        rows: list[list[int]] = []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise ParseError(lineno, f"expected {len(header)} fields, got {len(record)}")
            sid = record[id_pos].strip()
            if not sid:
                raise ParseError(lineno, "empty sample_id")
            if sid in seen:
                raise DuplicateSampleId(sid)
            seen.add(sid)
            row = []
            for lab, hi, pos in zip(schema.labels, schema.max_values, col_pos):
                raw = record[pos].strip()
                try:
                    v = int(raw)
                except ValueError:
                    raise ParseError(lineno, f"non-integer value {raw!r} for {lab!r}") from None
                if not 0 <= v <= hi:
                    raise OutOfRangeValue(len(ids), lab, v)
                row.append(v)
            ids.append(sid)
            rows.append(row)
    log.info("loaded %d manifest rows from %s", len(ids), path)
    values = np.array(rows, dtype=np.int64).reshape(len(ids), schema.n_labels)
    return Manifest(tuple(ids), values, schema)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([SAMPLE_ID, *manifest.schema.columns])
        for sid, row in zip(manifest.sample_ids, manifest.values):
            writer.writerow([sid, *(int(v) for v in row)])


def binarize_manifest(m: Manifest) -> BinaryLabelMatrix:
    """Graded labels become presence (grade >= 1) / absence (grade 0)."""
    return BinaryLabelMatrix(m.sample_ids, (m.values >= 1).astype(np.int8), m.schema.labels)


@dataclass(frozen=True, eq=False)
class FeatureTable:
    sample_ids: tuple[str, ...]
    values: np.ndarray  # (n_samples, n_features) float64
    names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (len(self.sample_ids), len(self.names)):
            raise ShapeMismatch(f"feature shape {values.shape} does not match table")
        object.__setattr__(self, "values", _frozen(values))

    def __len__(self):
        return len(self.sample_ids)

    def rows(self, sample_ids: Sequence[str]) -> np.ndarray:
        pos = self.index
        return self.values[[pos[s] for s in sample_ids]]

    @property
    def index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.sample_ids)}


def load_features(path: str | Path) -> FeatureTable:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "empty file") from None
        if not header or header[0] != SAMPLE_ID:
            raise MissingColumn(SAMPLE_ID)
        ids, rows, seen = [], [], set()
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise ParseError(lineno, f"expected {len(header)} fields, got {len(record)}")
            try:
                rows.append([float(v) for v in record[1:]])
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if record[0] in seen:
                raise DuplicateSampleId(record[0])
            seen.add(record[0])
            ids.append(record[0])
    values = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
    if not np.isfinite(values).all():
        raise ParseError(0, "non-finite feature value")
    return FeatureTable(tuple(ids), values, tuple(header[1:]))


def write_features(table: FeatureTable, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([SAMPLE_ID, *table.names])
        for sid, row in zip(table.sample_ids, table.values):
            writer.writerow([sid, *(repr(float(v)) for v in row)])


@dataclass(frozen=True)
class PipelineConfig:
    k_folds: int = 5
    n_labels: int = 11
    n_models: int = 6
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    oof_holdout_fraction: float = 0.25
    threshold: float = 0.5
    # hyperparameter search
    tune: bool = True
    n_trials: int = 30
    tune_epochs: int = 3
    tune_subset_fraction: float = 0.10
    n_startup_trials: int = 5
    median_include_pruned: bool = False
    # meta-learner
    gbdt_rounds: int = 200
    gbdt_max_depth: int = 4
    gbdt_eta: float = 0.1
    gbdt_lambda: float = 1.0
    gbdt_gamma: float = 0.0
    gbdt_min_child_weight: float = 1.0
    top_k_importance: int = 10
    jobs: int = 1

    def __post_init__(self):
        if self.k_folds < 2:
            raise InvalidConfig("k_folds must be >= 2")
        if not 0.0 < self.oof_holdout_fraction < 1.0:
            raise InvalidConfig("oof_holdout_fraction must lie in (0, 1)")
        if self.n_models < 1:
            raise InvalidConfig("n_models must be >= 1")
        if self.n_labels < 1:
            raise InvalidConfig("n_labels must be >= 1")
        if self.epochs < 1 or self.tune_epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.n_trials < 1:
            raise InvalidConfig("n_trials must be >= 1")
        if not 0.0 < self.tune_subset_fraction <= 1.0:
            raise InvalidConfig("tune_subset_fraction must lie in (0, 1]")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer")
        if self.jobs < 1:
            raise InvalidConfig("jobs must be >= 1")
        if not 1 <= self.top_k_importance <= 10:
            raise InvalidConfig("top_k_importance must lie in [1, 10]")
        if not 0.0 <= self.threshold <= 1.0:
            raise InvalidConfig("threshold must lie in [0, 1]")
        if self.gbdt_rounds < 1 or self.gbdt_max_depth < 1:
            raise InvalidConfig("gbdt_rounds and gbdt_max_depth must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from None
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)
