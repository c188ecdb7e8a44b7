"""Multilabel-stratified K-fold assignment (iterative stratification)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import SAMPLE_ID, BinaryLabelMatrix, _frozen
from .errors import DegenerateInput, FoldOutOfRange, ParseError


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    sample_ids: tuple[str, ...]
    fold_of: np.ndarray
    k: int

    def __post_init__(self):
        fold_of = np.asarray(self.fold_of, dtype=np.int64)
        if fold_of.shape != (len(self.sample_ids),):
            raise ValueError("fold_of must have one entry per sample")
        if fold_of.size and (fold_of.min() < 0 or fold_of.max() >= self.k):
            raise ValueError("fold index out of range")
        object.__setattr__(self, "fold_of", _frozen(fold_of))

    def __eq__(self, other):
        if not isinstance(other, FoldAssignment):
            return NotImplemented
        return self.k == other.k and self.sample_ids == other.sample_ids and np.array_equal(self.fold_of, other.fold_of)

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k)

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([SAMPLE_ID, "fold"])
            writer.writerows(zip(self.sample_ids, (int(f) for f in self.fold_of)))

    @classmethod
    def load(cls, path: str | Path, k: int | None = None) -> "FoldAssignment":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            if next(reader, None) != [SAMPLE_ID, "fold"]:
                raise ParseError(1, "fold file header must be 'sample_id,fold'")
            ids, folds = [], []
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                try:
                    ids.append(rec[0])
                    folds.append(int(rec[1]))
                except (IndexError, ValueError):
                    raise ParseError(lineno, f"bad fold row {rec!r}") from None
        if k is None:
            k = max(folds) + 1 if folds else 0
        return cls(tuple(ids), np.array(folds, dtype=np.int64), k)


def stratified_kfold(labels: BinaryLabelMatrix, k: int, seed: int) -> FoldAssignment:
    """Assign every sample to one of ``k`` folds, rarest label first.

    Greedy iterative stratification: repeatedly take the label with the
    fewest unassigned positives and hand each of those samples to the fold
    that still wants the most positives of that label. Ties go to the fold
    that most wants the sample's other labels, then to the fold with more
    remaining room, then to the lowest fold index. Samples without any
    positive label only balance fold sizes. A final swap pass (see
    ``_rebalance``) repairs frequent labels that the greedy pass overshot.
    """
    y = np.asarray(labels.values, dtype=np.int64)
    n, n_labels = y.shape
    if k < 2:
        raise DegenerateInput("k must be >= 2")
    if n < k:
        raise DegenerateInput(f"{n} samples cannot fill {k} folds")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    y_ord = y[order]

    want_label = np.tile(y.sum(axis=0) / k, (k, 1)).astype(np.float64)
    want_total = np.full(k, n / k)
    fold_of = np.full(n, -1, dtype=np.int64)
    unassigned = np.ones(n, dtype=bool)  # indexed in shuffled order

    def best_fold(scores: np.ndarray, row: np.ndarray | None = None) -> int:
        # lexicographic: max scores, then max summed desire for the sample's
        # other labels, then max remaining room, then lowest index
        cand = np.flatnonzero(scores == scores.max())
        if cand.size > 1 and row is not None:
            other = want_label[cand] @ row
            cand = cand[other == other.max()]
        if cand.size > 1:
            room = want_total[cand]
            cand = cand[room == room.max()]
        return int(cand[0])

    while True:
        remaining = y_ord[unassigned].sum(axis=0)
        if not remaining.any():
            break
        label = int(np.argmin(np.where(remaining > 0, remaining, np.iinfo(np.int64).max)))
        for pos in np.flatnonzero(unassigned & (y_ord[:, label] == 1)):
            j = best_fold(want_label[:, label], y_ord[pos])
            fold_of[order[pos]] = j
            want_label[j] -= y_ord[pos]
            want_total[j] -= 1
            unassigned[pos] = False

    for pos in np.flatnonzero(unassigned):
        j = best_fold(want_total)
        fold_of[order[pos]] = j
        want_total[j] -= 1

    return FoldAssignment(tuple(labels.sample_ids), _rebalance(y, fold_of, k), k)


def _rebalance(y: np.ndarray, fold_of: np.ndarray, k: int, max_swaps: int = 10_000) -> np.ndarray:
    """Pairwise swaps that pull per-fold positive counts back toward n_pos/k.

    The greedy pass can overshoot frequent labels on dense matrices because
    their positives are placed while rarer labels are processed. While some
    (fold, label) cell is more than one positive off its share, swap the pair
    of samples (one inside that fold, one outside) that most reduces the
    summed squared deviation. Swaps keep fold sizes fixed, accept only strict
    improvements, and break ties by lowest sample index, so the result is
    deterministic. Assignments that are already within one are returned as is.
    """
    # deviations are scaled by k so every quantity below is an exact integer
    yf = y.astype(np.float64)
    dev = np.zeros((k, y.shape[1]))
    np.add.at(dev, fold_of, k * yf)
    dev -= yf.sum(axis=0)
    card = yf.sum(axis=1)
    fold_of = fold_of.copy()
    for _ in range(max_swaps):
        f, lab = np.unravel_index(np.argmax(np.abs(dev)), dev.shape)
        if abs(dev[f, lab]) <= k:
            break
        outgoing = 1 if dev[f, lab] > 0 else 0
        a_idx = np.flatnonzero((fold_of == f) & (y[:, lab] == outgoing))
        b_idx = np.flatnonzero((fold_of != f) & (y[:, lab] != outgoing))
        if a_idx.size == 0 or b_idx.size == 0:
            break
        ya, yb = yf[a_idx], yf[b_idx]
        dev_b = dev[fold_of[b_idx]]
        # change in sum of squared deviations when a (fold f) and b trade places
        cross = ya @ dev_b.T - (ya @ dev[f])[:, None] - np.einsum("ij,ij->i", yb, dev_b)[None, :] + (yb @ dev[f])[None, :]
        moved = card[a_idx][:, None] + card[b_idx][None, :] - 2.0 * (ya @ yb.T)
        delta = 2.0 * k * cross + 2.0 * k * k * moved
        best = int(np.argmin(delta))
        if delta.flat[best] >= 0:
            break
        a, b = a_idx[best // b_idx.size], b_idx[best % b_idx.size]
        g = fold_of[b]
        dev[f] += k * (yf[b] - yf[a])
        dev[g] += k * (yf[a] - yf[b])
        fold_of[a], fold_of[b] = g, f
    return fold_of


def split_views(fa: FoldAssignment, fold: int) -> tuple[list[str], list[str]]:
    """``(train_ids, valid_ids)`` for one fold, both in sample order."""
    if not 0 <= fold < fa.k:
        raise FoldOutOfRange(f"fold {fold} not in [0, {fa.k})")
    in_fold = fa.fold_of == fold
    ids = fa.sample_ids
    train = [ids[i] for i in np.flatnonzero(~in_fold)]
    valid = [ids[i] for i in np.flatnonzero(in_fold)]
    return train, valid


def stratified_holdout(labels: BinaryLabelMatrix, fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Split off roughly ``fraction`` of the samples as one stratified fold.

    Returns ``(rest_ids, holdout_ids)``. Uses ``k = round(1 / fraction)``
    folds and keeps fold 0 as the hold-out.
    """
    if not 0.0 < fraction < 1.0:
        raise DegenerateInput("fraction must lie in (0, 1)")
    k = max(2, int(round(1.0 / fraction)))
    fa = stratified_kfold(labels, k, seed)
    return split_views(fa, 0)
