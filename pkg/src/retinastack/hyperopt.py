"""Seeded random search with a median pruner.

Trials run one after another. After every epoch a trial reports its
validation macro-AUC; once ``n_startup`` trials have completed, a trial whose
value at some epoch is strictly below the median of the completed trials'
values at that epoch is stopped.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .base_trainer import BaseLearnerSpec, train_fold
from .core import BinaryLabelMatrix
from .errors import AllTrialsPruned, InvalidConfig, TrialPruned
from .stratify import split_views, stratified_holdout, stratified_kfold

log = logging.getLogger(__name__)

DEFAULT_N_TRIALS = 30
DEFAULT_MAX_EPOCHS = 3
DEFAULT_SUBSET_FRACTION = 0.10
DEFAULT_N_STARTUP = 5


@dataclass(frozen=True)
class SearchSpace:
    lr_range: tuple[float, float] = (1e-6, 3e-4)
    wd_range: tuple[float, float] = (1e-6, 1e-2)
    dropout_range: tuple[float, float] = (0.0, 0.6)

    def __post_init__(self):
        for name in ("lr_range", "wd_range", "dropout_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfig(f"{name}: lower bound above upper bound")
        if self.lr_range[0] <= 0 or self.wd_range[0] <= 0:
            raise InvalidConfig("log-uniform ranges need positive lower bounds")


class TrialParams(NamedTuple):
    learning_rate: float
    weight_decay: float
    dropout_rate: float


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return lo
    return float(min(hi, max(lo, math.exp(rng.uniform(math.log(lo), math.log(hi))))))


def sample_params(space: SearchSpace, rng: np.random.Generator) -> TrialParams:
    lr = _log_uniform(rng, *space.lr_range)
    wd = _log_uniform(rng, *space.wd_range)
    lo, hi = space.dropout_range
    dropout = lo if lo == hi else float(rng.uniform(lo, hi))
    return TrialParams(lr, wd, dropout)


@dataclass
class TrialRecord:
    trial_id: int
    params: TrialParams
    intermediate: list[float] = field(default_factory=list)
    status: str = "running"
    final_value: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params"] = self.params._asdict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        return cls(d["trial_id"], TrialParams(**d["params"]), list(d["intermediate"]), d["status"], d["final_value"])


class MedianPruner:
    def __init__(self, n_startup_trials: int = DEFAULT_N_STARTUP, include_pruned: bool = False):
        self.n_startup_trials = n_startup_trials
        self.include_pruned = include_pruned

    def should_prune(self, history: Sequence[TrialRecord], step: int, value: float) -> bool:
        completed = [t for t in history if t.status == "completed"]
        if len(completed) < self.n_startup_trials or not completed:
            return False
        pool = [t for t in history if t.status == "completed" or (self.include_pruned and t.status == "pruned")]
        at_step = [t.intermediate[step - 1] for t in pool if len(t.intermediate) >= step]
        at_step = [v for v in at_step if not math.isnan(v)]
        if not at_step:
            return False
        # nan reports count as worse than anything
        return math.isnan(value) or value < float(np.median(at_step))


class Trial:
    """Handle passed to the objective for reporting per-epoch values."""

    def __init__(self, record: TrialRecord, history: Sequence[TrialRecord], pruner: MedianPruner, max_epochs: int):
        self._record = record
        self._history = history
        self._pruner = pruner
        self._max_epochs = max_epochs

    @property
    def trial_id(self) -> int:
        return self._record.trial_id

    @property
    def params(self) -> TrialParams:
        return self._record.params

    def report(self, step: int, value: float) -> None:
        if step != len(self._record.intermediate) + 1:
            raise ValueError(f"steps must be reported in order, expected {len(self._record.intermediate) + 1}")
        if step > self._max_epochs:
            raise ValueError(f"step {step} exceeds max_epochs={self._max_epochs}")
        self._record.intermediate.append(float(value))

    def should_prune(self) -> bool:
        # pruning at the last epoch would stop nothing
        step = len(self._record.intermediate)
        if step == 0 or step >= self._max_epochs:
            return False
        return self._pruner.should_prune(self._history, step, self._record.intermediate[-1])


Objective = Callable[[Trial], float]


def run_search(
    objective: Objective,
    n_trials: int = DEFAULT_N_TRIALS,
    max_epochs: int = DEFAULT_MAX_EPOCHS,
    seed: int = 0,
    space: SearchSpace | None = None,
    n_startup_trials: int = DEFAULT_N_STARTUP,
    include_pruned: bool = False,
) -> tuple[TrialRecord, list[TrialRecord]]:
    """Run ``n_trials`` sequential trials and return ``(best, all_records)``.

    The objective reports per-epoch values through ``trial.report`` and raises
    ``TrialPruned`` when ``trial.should_prune()`` says so. A completed trial's
    final value is its last reported value (or the returned value if it never
    reported).
    """
    if n_trials < 1:
        raise InvalidConfig("n_trials must be >= 1")
    if max_epochs < 1:
        raise InvalidConfig("max_epochs must be >= 1")
    space = space or SearchSpace()
    rng = np.random.default_rng(seed)
    pruner = MedianPruner(n_startup_trials, include_pruned)
    records: list[TrialRecord] = []
    for trial_id in range(n_trials):
        record = TrialRecord(trial_id, sample_params(space, rng))
        trial = Trial(record, records, pruner, max_epochs)
        try:
            value = objective(trial)
        except TrialPruned:
            record.status = "pruned"
            log.info("trial %d pruned after %d epochs", trial_id, len(record.intermediate))
        else:
            if not record.intermediate:
                record.intermediate.append(float(value))
            record.status = "completed"
            record.final_value = record.intermediate[-1]
            log.info("trial %d completed: %.6f", trial_id, record.final_value)
        records.append(record)

    completed = [r for r in records if r.status == "completed" and not math.isnan(r.final_value)]
    if not completed:
        raise AllTrialsPruned("no trial completed")
    best = max(completed, key=lambda r: (r.final_value, -r.trial_id))
    return best, records


def save_trial_log(records: Sequence[TrialRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_trial_log(path: str | Path) -> list[TrialRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [TrialRecord.from_dict(json.loads(line)) for line in lines if line.strip()]


def tune_base_learner(
    base: BaseLearnerSpec,
    features: np.ndarray,
    truth: BinaryLabelMatrix,
    *,
    n_trials: int = DEFAULT_N_TRIALS,
    max_epochs: int = DEFAULT_MAX_EPOCHS,
    subset_fraction: float = DEFAULT_SUBSET_FRACTION,
    batch_size: int = 32,
    seed: int = 0,
    space: SearchSpace | None = None,
    n_startup_trials: int = DEFAULT_N_STARTUP,
    include_pruned: bool = False,
) -> tuple[BaseLearnerSpec, TrialRecord, list[TrialRecord]]:
    """Search learning rate, weight decay and dropout for one base learner.

    Trials train on a stratified ``subset_fraction`` of the data, itself
    split 80/20 (stratified) into train and validation parts. Returns the
    base spec updated with the best parameters.
    """
    if not 0.0 < subset_fraction <= 1.0:
        raise InvalidConfig("subset_fraction must lie in (0, 1]")
    subset_seed, split_seed, trial_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3))
    if subset_fraction < 1.0:
        _, subset_ids = stratified_holdout(truth, subset_fraction, subset_seed)
    else:
        subset_ids = list(truth.sample_ids)
    sub_truth = truth.take(subset_ids)
    pos = {sid: i for i, sid in enumerate(truth.sample_ids)}
    sub_x = np.asarray(features)[[pos[s] for s in subset_ids]]
    view = split_views(stratified_kfold(sub_truth, 5, split_seed), 0)

    def objective(trial: Trial) -> float:
        p = trial.params
        spec = base.replace(learning_rate=p.learning_rate, weight_decay=p.weight_decay, dropout_rate=p.dropout_rate)

        def on_epoch(epoch: int, value: float) -> None:
            trial.report(epoch, value)
            if trial.should_prune():
                raise TrialPruned()

        model = train_fold(spec, sub_x, sub_truth, view, max_epochs, batch_size, trial_seed, on_epoch)
        return model.history[-1]

    best, records = run_search(objective, n_trials, max_epochs, seed, space, n_startup_trials, include_pruned)
    p = best.params
    tuned = base.replace(learning_rate=p.learning_rate, weight_decay=p.weight_decay, dropout_rate=p.dropout_rate)
    return tuned, best, records
