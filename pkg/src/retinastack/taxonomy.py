"""Align external ground-truth taxonomies with the model's output labels."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .core import BinaryLabelMatrix, LabelSchema, Manifest, load_manifest
from .errors import EmptyMapping, MissingColumn, ParseError, UnknownSourceLabel, UnknownTargetLabel

RFMID_PRESET = "rfmid_mapping.json"


@dataclass(frozen=True)
class LabelMapping:
    """target label -> source labels; a target is positive if any source is."""

    entries: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        if not self.entries:
            raise EmptyMapping("mapping has no targets")
        targets = [t for t, _ in self.entries]
        if len(set(targets)) != len(targets):
            raise ParseError(0, "duplicate mapping target")
        for target, sources in self.entries:
            if not sources:
                raise EmptyMapping(f"target {target!r} has no source labels")

    @classmethod
    def from_dict(cls, data: dict, schema: LabelSchema | None = None) -> "LabelMapping":
        schema = schema or LabelSchema.canonical()
        if not isinstance(data, dict):
            raise ParseError(0, "mapping must be a JSON object of target -> [sources]")
        entries = []
        for target, sources in data.items():
            if target not in schema.labels:
                raise UnknownTargetLabel(target)
            if not isinstance(sources, list) or not all(isinstance(s, str) for s in sources):
                raise ParseError(0, f"sources for {target!r} must be a list of strings")
            entries.append((target, tuple(sources)))
        return cls(tuple(entries))

    def to_dict(self) -> dict:
        return {t: list(s) for t, s in self.entries}

    @property
    def targets(self) -> tuple[str, ...]:
        return tuple(t for t, _ in self.entries)

    def sources(self, target: str) -> tuple[str, ...]:
        return dict(self.entries)[target]

    @property
    def source_labels(self) -> list[str]:
        return list(dict.fromkeys(s for _, srcs in self.entries for s in srcs))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_mapping(path: str | Path, schema: LabelSchema | None = None) -> LabelMapping:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None
    return LabelMapping.from_dict(data, schema)


def rfmid_mapping() -> LabelMapping:
    text = resources.files("retinastack.data").joinpath(RFMID_PRESET).read_text(encoding="utf-8")
    return LabelMapping.from_dict(json.loads(text))


def map_ground_truth(external: Manifest, mapping: LabelMapping, schema: LabelSchema | None = None) -> BinaryLabelMatrix:
    """OR-aggregate external labels onto the schema.

    Schema labels without a mapping entry come back as zeros and are listed
    in ``excluded`` so metrics leave them out.
    """
    schema = schema or LabelSchema.canonical()
    src = {lab: j for j, lab in enumerate(external.schema.labels)}
    for name in mapping.source_labels:
        if name not in src:
            raise UnknownSourceLabel(name)
    present = external.values >= 1
    out = np.zeros((len(external), schema.n_labels), dtype=np.int8)
    mapped = dict(mapping.entries)
    for j, target in enumerate(schema.labels):
        if target in mapped:
            cols = [src[s] for s in mapped[target]]
            out[:, j] = present[:, cols].any(axis=1)
    excluded = tuple(lab for lab in schema.labels if lab not in mapped)
    return BinaryLabelMatrix(external.sample_ids, out, schema.labels, excluded)


def load_external_manifest(path: str | Path, id_column: str = "sample_id") -> Manifest:
    """Load a 0/1 table whose columns are an external taxonomy's label names."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    if id_column not in header:
        raise MissingColumn(id_column)
    names = [h for h in header if h != id_column]
    return load_manifest(path, LabelSchema.binary(names), id_column=id_column)
