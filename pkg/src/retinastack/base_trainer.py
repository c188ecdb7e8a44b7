"""Desk-scale base classifiers trained with BCE-with-logits and AdamW.

A base learner is either linear (``hidden_units == 0``) or has one tanh
hidden layer. Each learner sees a seeded random subset of the input columns,
which together with differing widths, dropout and seeds gives the ensemble
decorrelated errors.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import SAMPLE_ID, BinaryLabelMatrix, _frozen
from .errors import DimensionMismatch, InvalidConfig, NonFiniteLoss, ParseError, ShapeMismatch
from .metrics import macro_auc

log = logging.getLogger(__name__)

MAX_DROPOUT = 0.6


@dataclass(frozen=True)
class BaseLearnerSpec:
    model_id: str
    hidden_units: int = 0
    dropout_rate: float = 0.0
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    feature_subset_seed: int | None = None
    feature_fraction: float = 0.8

    def __post_init__(self):
        if self.hidden_units < 0:
            raise InvalidConfig("hidden_units must be >= 0")
        if not 0.0 <= self.dropout_rate <= MAX_DROPOUT:
            raise InvalidConfig(f"dropout_rate must lie in [0, {MAX_DROPOUT}]")
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be positive")
        if self.weight_decay < 0:
            raise InvalidConfig("weight_decay must be non-negative")
        if not 0.0 < self.feature_fraction <= 1.0:
            raise InvalidConfig("feature_fraction must lie in (0, 1]")

    def replace(self, **changes) -> "BaseLearnerSpec":
        return dataclasses.replace(self, **changes)

    def feature_index(self, input_dim: int) -> np.ndarray:
        """Sorted input columns this learner reads."""
        if self.feature_subset_seed is None or self.feature_fraction >= 1.0:
            return np.arange(input_dim)
        n_keep = max(1, int(round(self.feature_fraction * input_dim)))
        rng = np.random.default_rng(self.feature_subset_seed)
        return np.sort(rng.choice(input_dim, size=n_keep, replace=False))


# --- loss -------------------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits, targets) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on raw logits and its gradient.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` so large |z| never overflows.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeMismatch(f"logits {z.shape} vs targets {y.shape}")
    n = z.size
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(loss.sum() / n), (sigmoid(z) - y) / n


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamWState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(
    params: list[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One in-place AdamW update.

    The decay multiplies the weights by ``1 - lr * weight_decay`` before and
    independently of the moment-based step.
    """
    b1, b2 = betas
    state.t += 1
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    shrink = 1.0 - lr * weight_decay
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape}")
        p *= shrink
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


# --- network ----------------------------------------------------------------


def init_params(n_in: int, hidden_units: int, n_out: int, rng: np.random.Generator) -> list[np.ndarray]:
    def layer(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)), rng.uniform(-bound, bound, size=fan_out)

    if hidden_units == 0:
        return list(layer(n_in, n_out))
    w1, b1 = layer(n_in, hidden_units)
    w2, b2 = layer(hidden_units, n_out)
    return [w1, b1, w2, b2]


def forward(params: Sequence[np.ndarray], x: np.ndarray, keep_mask: np.ndarray | None = None):
    """Logits for a batch plus the cache ``backward`` needs.

    ``keep_mask`` (already divided by the keep probability) is applied to the
    input of the output layer: the raw inputs of a linear model, the hidden
    activations otherwise.
    """
    if len(params) == 2:
        w, b = params
        xin = x if keep_mask is None else x * keep_mask
        return xin @ w + b, (x, xin, None, keep_mask)
    w1, b1, w2, b2 = params
    hid = np.tanh(x @ w1 + b1)
    hin = hid if keep_mask is None else hid * keep_mask
    return hin @ w2 + b2, (x, hin, hid, keep_mask)


def backward(params: Sequence[np.ndarray], cache, dlogits: np.ndarray, wrt_input: bool = False):
    """Gradients of a scalar w.r.t. every parameter (and optionally the input)."""
    x, layer_in, hid, keep = cache
    if len(params) == 2:
        w, _ = params
        grads = [layer_in.T @ dlogits, dlogits.sum(axis=0)]
        if not wrt_input:
            return grads
        dx = dlogits @ w.T
        return grads, (dx if keep is None else dx * keep)
    w1, _, w2, _ = params
    dhin = dlogits @ w2.T
    dhid = dhin if keep is None else dhin * keep
    dpre = dhid * (1.0 - hid * hid)
    grads = [x.T @ dpre, dpre.sum(axis=0), layer_in.T @ dlogits, dlogits.sum(axis=0)]
    if not wrt_input:
        return grads
    return grads, dpre @ w1.T


def loss_and_grads(params, x, y, keep_mask=None) -> tuple[float, list[np.ndarray]]:
    logits, cache = forward(params, x, keep_mask)
    loss, dlogits = bce_with_logits(logits, y)
    return loss, backward(params, cache, dlogits)


# --- models -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PredictionMatrix:
    sample_ids: tuple[str, ...]
    probs: np.ndarray
    model_id: str
    labels: tuple[str, ...]

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (len(self.sample_ids), len(self.labels)):
            raise ShapeMismatch(f"probs shape {probs.shape} does not match matrix")
        if probs.size and (np.any(probs < 0) or np.any(probs > 1) or not np.isfinite(probs).all()):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "probs", _frozen(probs))

    def __len__(self):
        return len(self.sample_ids)

    def take(self, sample_ids: Sequence[str]) -> "PredictionMatrix":
        pos = {sid: i for i, sid in enumerate(self.sample_ids)}
        return PredictionMatrix(tuple(sample_ids), self.probs[[pos[s] for s in sample_ids]], self.model_id, self.labels)

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([SAMPLE_ID, *self.labels])
            for sid, row in zip(self.sample_ids, self.probs):
                writer.writerow([sid, *(repr(float(p)) for p in row)])

    @classmethod
    def load_csv(cls, path: str | Path, model_id: str) -> "PredictionMatrix":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != SAMPLE_ID:
                raise ParseError(1, "prediction file must start with sample_id")
            ids, rows = [], []
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                try:
                    rows.append([float(v) for v in rec[1:]])
                except ValueError as exc:
                    raise ParseError(lineno, str(exc)) from None
                ids.append(rec[0])
        return cls(tuple(ids), np.array(rows).reshape(len(ids), len(header) - 1), model_id, tuple(header[1:]))


@dataclass(frozen=True, eq=False)
class BaseLearnerModel:
    spec: BaseLearnerSpec
    params: tuple[np.ndarray, ...]
    feature_index: np.ndarray
    input_dim: int
    labels: tuple[str, ...]
    best_epoch: int = 0
    best_macro_auc: float = float("nan")
    history: tuple[float, ...] = ()
    feature_mean: np.ndarray | None = None
    # validation predictions per epoch; only kept when asked for, never saved
    epoch_predictions: tuple[np.ndarray, ...] = field(default=(), repr=False)

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(_frozen(p) for p in self.params))
        object.__setattr__(self, "feature_index", _frozen(np.asarray(self.feature_index, dtype=np.int64)))
        if self.feature_mean is not None:
            object.__setattr__(self, "feature_mean", _frozen(np.asarray(self.feature_mean, dtype=np.float64)))
        if self.params[-1].shape != (len(self.labels),):
            raise ShapeMismatch("output layer width must equal the number of labels")

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def model_id(self) -> str:
        return self.spec.model_id

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionMismatch(f"expected (n, {self.input_dim}) features, got {x.shape}")
        return x

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        return forward(self.params, x[:, self.feature_index])[0]

    def logit_input_gradient(self, x: np.ndarray, label: int) -> np.ndarray:
        """d logit[label] / d x for every row, over the full input width."""
        x = self._check(x)
        logits, cache = forward(self.params, x[:, self.feature_index])
        seed = np.zeros_like(logits)
        seed[:, label] = 1.0
        _, dx_sub = backward(self.params, cache, seed, wrt_input=True)
        dx = np.zeros_like(x)
        dx[:, self.feature_index] = dx_sub
        return dx

    def to_dict(self) -> dict:
        return {
            "format": "retinastack.base_learner/1",
            "spec": dataclasses.asdict(self.spec),
            "input_dim": self.input_dim,
            "labels": list(self.labels),
            "feature_index": self.feature_index.tolist(),
            "params": [{"shape": list(p.shape), "values": p.ravel().tolist()} for p in self.params],
            "best_epoch": self.best_epoch,
            "best_macro_auc": self.best_macro_auc,
            "history": list(self.history),
            "feature_mean": None if self.feature_mean is None else self.feature_mean.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaseLearnerModel":
        if d.get("format") != "retinastack.base_learner/1":
            raise ParseError(0, "not a base learner artifact")
        params = tuple(np.array(p["values"], dtype=np.float64).reshape(p["shape"]) for p in d["params"])
        return cls(
            spec=BaseLearnerSpec(**d["spec"]),
            params=params,
            feature_index=np.array(d["feature_index"], dtype=np.int64),
            input_dim=d["input_dim"],
            labels=tuple(d["labels"]),
            best_epoch=d["best_epoch"],
            best_macro_auc=d["best_macro_auc"],
            history=tuple(d["history"]),
            feature_mean=None if d["feature_mean"] is None else np.array(d["feature_mean"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BaseLearnerModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def predict(model: BaseLearnerModel, features: np.ndarray, sample_ids: Sequence[str] | None = None) -> PredictionMatrix:
    probs = sigmoid(model.logits(features))
    if sample_ids is None:
        sample_ids = [str(i) for i in range(probs.shape[0])]
    return PredictionMatrix(tuple(sample_ids), probs, model.model_id, model.labels)


EpochCallback = Callable[[int, float], None]


def train_fold(
    spec: BaseLearnerSpec,
    features: np.ndarray,
    truth: BinaryLabelMatrix,
    fold_view: tuple[Sequence[str], Sequence[str]],
    epochs: int = 10,
    batch_size: int = 32,
    seed: int = 0,
    on_epoch: EpochCallback | None = None,
    keep_epoch_predictions: bool = False,
) -> BaseLearnerModel:
    """Train on ``fold_view[0]``, keep the epoch with the best validation macro-AUC.

    ``features`` rows align with ``truth.sample_ids``. ``on_epoch(epoch,
    macro_auc)`` runs after every epoch (1-based) and may raise to stop
    training, which is how the hyperparameter search prunes.
    """
    if epochs < 1:
        raise InvalidConfig("epochs must be >= 1")
    if batch_size < 1:
        raise InvalidConfig("batch_size must be >= 1")
    x_all = np.asarray(features, dtype=np.float64)
    if x_all.ndim != 2 or x_all.shape[0] != len(truth):
        raise ShapeMismatch("feature rows must align with ground-truth rows")
    pos = {sid: i for i, sid in enumerate(truth.sample_ids)}
    train_rows = np.array([pos[s] for s in fold_view[0]], dtype=np.int64)
    valid_rows = np.array([pos[s] for s in fold_view[1]], dtype=np.int64)
    if train_rows.size == 0:
        raise ShapeMismatch("empty training split")

    input_dim = x_all.shape[1]
    cols = spec.feature_index(input_dim)
    x_train = x_all[np.ix_(train_rows, cols)]
    y_train = truth.values[train_rows].astype(np.float64)
    x_valid = x_all[np.ix_(valid_rows, cols)]
    y_valid = truth.values[valid_rows]
    n_labels = y_train.shape[1]

    init_rng, shuffle_rng, drop_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    params = init_params(cols.size, spec.hidden_units, n_labels, init_rng)
    state = AdamWState.zeros_like(params)
    keep_p = 1.0 - spec.dropout_rate
    drop_width = cols.size if spec.hidden_units == 0 else spec.hidden_units

    best_score = -np.inf
    best_params = [p.copy() for p in params]
    best_epoch = 0
    history: list[float] = []
    logged: list[np.ndarray] = []
    n = train_rows.size
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(n)
        for step, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            mask = None
            if spec.dropout_rate > 0:
                mask = (drop_rng.random((idx.size, drop_width)) < keep_p) / keep_p
            loss, grads = loss_and_grads(params, x_train[idx], y_train[idx], mask)
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, step, loss)
            adamw_step(params, grads, state, spec.learning_rate, spec.weight_decay)

        probs = sigmoid(forward(params, x_valid)[0]) if valid_rows.size else np.empty((0, n_labels))
        score = macro_auc(probs, y_valid) if valid_rows.size else float("nan")
        history.append(score)
        if keep_epoch_predictions:
            logged.append(probs)
        log.debug("%s epoch %d: valid macro-AUC %.6f", spec.model_id, epoch, score)
        # nan (no evaluable label) never beats a real score; epoch 1 is the fallback
        if best_epoch == 0 or (not np.isnan(score) and (np.isnan(best_score) or score > best_score)):
            best_score, best_epoch = score, epoch
            best_params = [p.copy() for p in params]
        if on_epoch is not None:
            on_epoch(epoch, score)

    return BaseLearnerModel(
        spec=spec,
        params=tuple(best_params),
        feature_index=cols,
        input_dim=input_dim,
        labels=tuple(truth.labels),
        best_epoch=best_epoch,
        best_macro_auc=float(best_score),
        history=tuple(history),
        feature_mean=x_all[train_rows].mean(axis=0),
        epoch_predictions=tuple(logged),
    )
