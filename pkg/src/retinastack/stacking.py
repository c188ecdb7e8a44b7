"""Out-of-fold stacking and the per-label gradient-boosted tree meta-learner."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from numba import njit

from .base_trainer import PredictionMatrix, sigmoid
from .core import SAMPLE_ID, BinaryLabelMatrix, _frozen
from .errors import (
    CoverageGap,
    DegenerateInput,
    DegenerateTarget,
    DimensionMismatch,
    EmptyForest,
    LeakageDetected,
    MissingFoldPrediction,
    ParseError,
    ShapeMismatch,
)
from .stratify import FoldAssignment, stratified_holdout

META_MODEL_ID = "meta"


# --- OOF assembly -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OofMatrix:
    sample_ids: tuple[str, ...]
    features: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.shape != (len(self.sample_ids), len(self.feature_names)):
            raise ShapeMismatch(f"OOF shape {feats.shape} does not match names/ids")
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "features", _frozen(feats))

    def __len__(self):
        return len(self.sample_ids)

    def take(self, sample_ids: Sequence[str]) -> "OofMatrix":
        pos = {sid: i for i, sid in enumerate(self.sample_ids)}
        return OofMatrix(tuple(sample_ids), self.features[[pos[s] for s in sample_ids]], self.feature_names)

    def model_block(self, model_id: str, labels: Sequence[str]) -> PredictionMatrix:
        """The columns one base model contributed, as a prediction matrix."""
        idx = [self.feature_names.index(f"{model_id}:{lab}") for lab in labels]
        return PredictionMatrix(self.sample_ids, self.features[:, idx], model_id, tuple(labels))

    @property
    def model_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for name in self.feature_names:
            seen.setdefault(name.split(":", 1)[0])
        return list(seen)

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([SAMPLE_ID, *self.feature_names])
            for sid, row in zip(self.sample_ids, self.features):
                writer.writerow([sid, *(repr(float(v)) for v in row)])

    @classmethod
    def load_csv(cls, path: str | Path) -> "OofMatrix":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != SAMPLE_ID:
                raise ParseError(1, "OOF file must start with sample_id")
            ids, rows = [], []
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                try:
                    rows.append([float(v) for v in rec[1:]])
                except ValueError as exc:
                    raise ParseError(lineno, str(exc)) from None
                ids.append(rec[0])
        return cls(tuple(ids), np.array(rows).reshape(len(ids), len(header) - 1), tuple(header[1:]))


def assemble_oof(
    per_fold_predictions: Mapping[tuple[str, int], PredictionMatrix],
    fa: FoldAssignment,
    labels: Sequence[str],
) -> OofMatrix:
    """Stitch per-fold validation predictions into one leak-free meta-feature matrix.

    Columns are model-major, label-minor and named ``model_id:label``; models
    appear in the order they first occur in ``per_fold_predictions``. Every
    prediction for ``(model, fold)`` may only cover samples assigned to
    ``fold`` -- anything else was in that model's training split.
    """
    labels = tuple(labels)
    model_ids = list(dict.fromkeys(m for m, _ in per_fold_predictions))
    if not model_ids:
        raise MissingFoldPrediction("<none>", 0)
    fold_pos = {sid: i for i, sid in enumerate(fa.sample_ids)}
    n, n_lab = len(fa.sample_ids), len(labels)
    feats = np.full((n, len(model_ids) * n_lab), np.nan)
    for m_idx, model_id in enumerate(model_ids):
        cols = slice(m_idx * n_lab, (m_idx + 1) * n_lab)
        for fold in range(fa.k):
            pred = per_fold_predictions.get((model_id, fold))
            if pred is None:
                raise MissingFoldPrediction(model_id, fold)
            if tuple(pred.labels) != labels:
                raise ShapeMismatch(f"{model_id} fold {fold}: label order {pred.labels} != {labels}")
            rows = []
            for sid in pred.sample_ids:
                i = fold_pos.get(sid)
                if i is None or fa.fold_of[i] != fold:
                    raise LeakageDetected(sid, model_id)
                rows.append(i)
            feats[rows, cols] = pred.probs
        gap = np.flatnonzero(np.isnan(feats[:, cols]).any(axis=1))
        if gap.size:
            raise CoverageGap(fa.sample_ids[gap[0]])
    names = tuple(f"{m}:{lab}" for m in model_ids for lab in labels)
    return OofMatrix(fa.sample_ids, feats, names)


class StackingPart(NamedTuple):
    oof: OofMatrix
    truth: BinaryLabelMatrix


def holdout_split(
    oof: OofMatrix, truth: BinaryLabelMatrix, fraction: float = 0.25, seed: int = 0
) -> tuple[StackingPart, StackingPart]:
    """Stratified ``(fit_part, eval_part)`` split of the OOF rows; eval gets ``fraction``."""
    if not 0.0 < fraction < 1.0:
        raise DegenerateInput("fraction must lie in (0, 1)")
    aligned = truth.take(oof.sample_ids)
    fit_ids, eval_ids = stratified_holdout(aligned, fraction, seed)
    return (
        StackingPart(oof.take(fit_ids), aligned.take(fit_ids)),
        StackingPart(oof.take(eval_ids), aligned.take(eval_ids)),
    )


# --- gradient boosted trees -------------------------------------------------


@dataclass(frozen=True)
class GbdtParams:
    rounds: int = 200
    max_depth: int = 4
    eta: float = 0.1
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    base_score: float = 0.0

    def __post_init__(self):
        if self.rounds < 0 or self.max_depth < 0:
            raise ValueError("rounds and max_depth must be non-negative")
        if self.eta <= 0 or self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("eta must be positive; lambda, gamma, min_child_weight non-negative")


@dataclass(frozen=True, eq=False)
class GbdtTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf.

    Rows with ``x[feature] < threshold`` go left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            r, nd, ff = rows[inner], node[inner], f[inner]
            go_left = x[r, ff] < self.threshold[nd]
            node[inner] = np.where(go_left, self.left[nd], self.right[nd])

    @property
    def depth(self) -> int:
        def walk(i):
            return 0 if self.feature[i] < 0 else 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtTree":
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=np.float64),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            np.array(d["value"], dtype=np.float64),
            np.array(d["gain"], dtype=np.float64),
        )


def split_gain(gl, hl, gr, hr, reg_lambda, gamma):
    """Loss reduction of splitting a node into (left, right) gradient/hessian sums."""
    g, h = gl + gr, hl + hr
    return 0.5 * (gl * gl / (hl + reg_lambda) + gr * gr / (hr + reg_lambda) - g * g / (h + reg_lambda)) - gamma


GAIN_RTOL = 1e-10


@njit(cache=True)
def _grow(x, order, x_sorted, g, h, max_depth, eta, reg_lambda, gamma, min_child_weight):
    # Level-wise exact greedy growth. Per level and feature, one pass over the
    # presorted rows updates the running (G_L, H_L) of every open node, so a
    # level costs O(n_rows * n_features). Candidates are visited in
    # (feature, ascending threshold) order and only a gain larger than the
    # incumbent by more than GAIN_RTOL (relative) replaces it. Two features
    # that induce the same partition have mathematically equal gains, but the
    # prefix sums reach them in different row orders, so their float values
    # can differ in the last bits; the tolerance makes such ties resolve to
    # the lowest feature and threshold.
    n, d = x.shape
    cap = 2 ** (max_depth + 1) - 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    gain = np.zeros(cap)
    g_tot = np.zeros(cap)
    h_tot = np.zeros(cap)
    node_of = np.zeros(n, dtype=np.int64)
    for r in range(n):
        g_tot[0] += g[r]
        h_tot[0] += h[r]
    n_nodes = 1
    lo, hi = 0, 1
    for depth in range(max_depth + 1):
        width = hi - lo
        best = np.zeros(width)
        best_f = np.full(width, -1, dtype=np.int64)
        best_t = np.zeros(width)
        if depth < max_depth:
            gl = np.zeros(width)
            hl = np.zeros(width)
            last = np.zeros(width)
            seen = np.zeros(width, dtype=np.bool_)
            for f in range(d):
                gl[:] = 0.0
                hl[:] = 0.0
                seen[:] = False
                for k in range(n):
                    r = order[f, k]
                    nd = node_of[r] - lo
                    if nd < 0:
                        continue
                    v = x_sorted[f, k]
                    if seen[nd] and v != last[nd]:
                        node = nd + lo
                        gr = g_tot[node] - gl[nd]
                        hr = h_tot[node] - hl[nd]
                        if hl[nd] >= min_child_weight and hr >= min_child_weight:
                            gn = 0.5 * (
                                gl[nd] * gl[nd] / (hl[nd] + reg_lambda)
                                + gr * gr / (hr + reg_lambda)
                                - g_tot[node] * g_tot[node] / (h_tot[node] + reg_lambda)
                            ) - gamma
                            if gn > best[nd] + GAIN_RTOL * abs(best[nd]):
                                best[nd] = gn
                                best_f[nd] = f
                                t = (last[nd] + v) / 2.0
                                best_t[nd] = v if t <= last[nd] else t
                    gl[nd] += g[r]
                    hl[nd] += h[r]
                    last[nd] = v
                    seen[nd] = True
        for nd in range(width):
            node = nd + lo
            if best_f[nd] >= 0:
                feature[node] = best_f[nd]
                threshold[node] = best_t[nd]
                gain[node] = best[nd]
                left[node] = n_nodes
                right[node] = n_nodes + 1
                n_nodes += 2
            else:
                value[node] = -eta * g_tot[node] / (h_tot[node] + reg_lambda)
        if n_nodes == hi:
            break
        for r in range(n):
            node = node_of[r]
            if node < lo or feature[node] < 0:
                continue
            child = left[node] if x[r, feature[node]] < threshold[node] else right[node]
            node_of[r] = child
            g_tot[child] += g[r]
            h_tot[child] += h[r]
        lo, hi = hi, n_nodes
    return (
        feature[:n_nodes],
        threshold[:n_nodes],
        left[:n_nodes],
        right[:n_nodes],
        value[:n_nodes],
        gain[:n_nodes],
    )


def build_tree(
    x: np.ndarray,
    order: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    params: GbdtParams,
    x_sorted: np.ndarray | None = None,
) -> GbdtTree:
    """Grow one regression tree on gradients ``g`` and hessians ``h``.

    ``order`` is ``(n_features, n_rows)``: for every feature, the row indices
    sorted by value. Thresholds sit at midpoints between consecutive distinct
    values; equal gains resolve to the lowest feature, then lowest threshold.
    A node becomes a leaf at ``max_depth``, when no split has positive gain,
    or when every split leaves a child with hessian sum below
    ``min_child_weight``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    if x_sorted is None:
        x_sorted = np.take_along_axis(x.T, order, axis=1)
    arrays = _grow(
        x,
        order,
        np.ascontiguousarray(x_sorted),
        np.ascontiguousarray(g, dtype=np.float64),
        np.ascontiguousarray(h, dtype=np.float64),
        params.max_depth,
        params.eta,
        params.reg_lambda,
        params.gamma,
        params.min_child_weight,
    )
    return GbdtTree(*arrays)


def logistic_loss(margin: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.maximum(margin, 0.0) - margin * y + np.log1p(np.exp(-np.abs(margin)))))


@dataclass(frozen=True, eq=False)
class Forest:
    trees: tuple[GbdtTree, ...]
    base_score: float = 0.0
    train_loss: tuple[float, ...] = ()

    def margin(self, x: np.ndarray) -> np.ndarray:
        out = np.full(x.shape[0], self.base_score)
        for tree in self.trees:
            out += tree.predict(x)
        return out

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return sigmoid(self.margin(x))


def sort_order(x: np.ndarray) -> np.ndarray:
    return np.argsort(x, axis=0, kind="stable").T.copy()


def fit_gbdt(
    features: np.ndarray,
    targets: np.ndarray,
    params: GbdtParams | None = None,
    seed: int = 0,
    order: np.ndarray | None = None,
) -> Forest:
    """Second-order boosting of depth-limited trees on the logistic loss.

    Each round fits a tree to ``g = p - y`` and ``h = p (1 - p)``; leaves take
    the shrunken Newton step ``-eta * G / (H + lambda)``. ``train_loss[r]`` is
    the loss after ``r`` rounds. No row or column subsampling is done, so
    ``seed`` does not change the result.
    """
    params = params or GbdtParams()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ShapeMismatch("features and targets must have matching rows")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise DegenerateTarget(f"target has {n_pos} positives out of {y.size}")
    if order is None:
        order = sort_order(x)
    x_sorted = np.take_along_axis(x.T, order, axis=1)
    margin = np.full(y.size, params.base_score)
    trees = []
    losses = [logistic_loss(margin, y)]
    for _ in range(params.rounds):
        p = sigmoid(margin)
        tree = build_tree(x, order, p - y, p * (1.0 - p), params, x_sorted)
        trees.append(tree)
        margin = margin + tree.predict(x)
        losses.append(logistic_loss(margin, y))
    return Forest(tuple(trees), params.base_score, tuple(losses))


# --- meta-learner -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GbdtMetaLearner:
    """One independent boosted forest per output label.

    Labels whose training targets were all one class have no forest and are
    predicted at their observed prevalence.
    """

    labels: tuple[str, ...]
    feature_names: tuple[str, ...]
    forests: tuple[Forest | None, ...]
    params: GbdtParams
    prevalence: tuple[float, ...]

    @property
    def degenerate_labels(self) -> list[str]:
        return [lab for lab, f in zip(self.labels, self.forests) if f is None]

    def to_dict(self) -> dict:
        return {
            "format": "retinastack.gbdt_meta/1",
            "labels": list(self.labels),
            "feature_names": list(self.feature_names),
            "params": dataclasses.asdict(self.params),
            "prevalence": list(self.prevalence),
            "forests": [
                None
                if f is None
                else {"base_score": f.base_score, "train_loss": list(f.train_loss), "trees": [t.to_dict() for t in f.trees]}
                for f in self.forests
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtMetaLearner":
        if d.get("format") != "retinastack.gbdt_meta/1":
            raise ParseError(0, "not a meta-learner artifact")
        forests = tuple(
            None
            if f is None
            else Forest(tuple(GbdtTree.from_dict(t) for t in f["trees"]), f["base_score"], tuple(f["train_loss"]))
            for f in d["forests"]
        )
        return cls(tuple(d["labels"]), tuple(d["feature_names"]), forests, GbdtParams(**d["params"]), tuple(d["prevalence"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GbdtMetaLearner":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_meta(oof_fit: OofMatrix, truth: BinaryLabelMatrix, params: GbdtParams | None = None, seed: int = 0) -> GbdtMetaLearner:
    """Fit one forest per label on the OOF meta-features.

    Trees are grown on the columns sorted by feature name, so equal-gain ties
    resolve by name and the fit does not depend on column order; split
    features are mapped back to the caller's column indices afterwards.
    """
    params = params or GbdtParams()
    aligned = truth.take(oof_fit.sample_ids)
    canon = np.array(sorted(range(len(oof_fit.feature_names)), key=lambda i: oof_fit.feature_names[i]), dtype=np.int64)
    x = np.ascontiguousarray(oof_fit.features[:, canon])
    order = sort_order(x)
    forests, prevalence = [], []
    for j, _ in enumerate(aligned.labels):
        y = aligned.values[:, j].astype(np.float64)
        prevalence.append(float(y.mean()) if y.size else 0.0)
        try:
            forest = fit_gbdt(x, y, params, seed, order)
        except DegenerateTarget:
            forests.append(None)
            continue
        trees = tuple(dataclasses.replace(t, feature=np.where(t.feature >= 0, canon[np.maximum(t.feature, 0)], -1)) for t in forest.trees)
        forests.append(Forest(trees, forest.base_score, forest.train_loss))
    return GbdtMetaLearner(tuple(aligned.labels), oof_fit.feature_names, tuple(forests), params, tuple(prevalence))


def predict_meta(m: GbdtMetaLearner, features, sample_ids: Sequence[str] | None = None) -> PredictionMatrix:
    if isinstance(features, OofMatrix):
        if features.feature_names != m.feature_names:
            raise DimensionMismatch("OOF feature names differ from the meta-learner's")
        sample_ids = features.sample_ids
        features = features.features
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != len(m.feature_names):
        raise DimensionMismatch(f"expected {len(m.feature_names)} meta-features, got shape {x.shape}")
    probs = np.empty((x.shape[0], len(m.labels)))
    for j, forest in enumerate(m.forests):
        probs[:, j] = m.prevalence[j] if forest is None else forest.predict_proba(x)
    if sample_ids is None:
        sample_ids = [str(i) for i in range(x.shape[0])]
    return PredictionMatrix(tuple(sample_ids), probs, META_MODEL_ID, m.labels)


def feature_importance(m: GbdtMetaLearner, label: str) -> list[tuple[str, float]]:
    """Total split gain per meta-feature for one label, normalized to sum to 1.

    Every feature is listed, highest share first (ties by feature order).
    """
    forest = m.forests[m.labels.index(label)]
    if forest is None or not forest.trees:
        raise EmptyForest(f"no trees for label {label!r}")
    totals = np.zeros(len(m.feature_names))
    for tree in forest.trees:
        inner = tree.feature >= 0
        np.add.at(totals, tree.feature[inner], tree.gain[inner])
    if totals.sum() <= 0:
        raise EmptyForest(f"forest for {label!r} never split")
    shares = totals / totals.sum()
    ranked = sorted(range(len(shares)), key=lambda i: (-shares[i], i))
    return [(m.feature_names[i], float(shares[i])) for i in ranked]


def save_importance(ranked: Sequence[tuple[str, float]], path: str | Path, top_k: int | None = 10) -> None:
    rows = ranked if top_k is None else ranked[:top_k]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["feature", "gain_share"])
        for name, share in rows:
            writer.writerow([name, repr(share)])
