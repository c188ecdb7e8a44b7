"""Exception hierarchy.

``ValidationError`` subclasses signal bad input (CLI exit code 2); everything
else deriving from ``StageError`` is a failure inside a pipeline stage
(exit code 3).
"""


class RetinaStackError(Exception):
    pass


class ValidationError(RetinaStackError, ValueError):
    pass


class StageError(RetinaStackError, RuntimeError):
    pass


# manifest / config


class MissingColumn(ValidationError):
    def __init__(self, column):
        super().__init__(f"missing column {column!r}")
        self.column = column


class DuplicateSampleId(ValidationError):
    def __init__(self, sample_id):
        super().__init__(f"duplicate sample_id {sample_id!r}")
        self.sample_id = sample_id


class OutOfRangeValue(ValidationError):
    def __init__(self, row, label, value):
        super().__init__(f"row {row}: value {value!r} out of range for label {label!r}")
        self.row = row
        self.label = label
        self.value = value


class ParseError(ValidationError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InvalidConfig(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


# splitting / shapes


class DegenerateInput(ValidationError):
    pass


class FoldOutOfRange(ValidationError, IndexError):
    pass


class LengthMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class DegenerateClass(ValidationError):
    """Raised when a label column has no positives or no negatives."""


class DegenerateTarget(DegenerateClass):
    pass


# training


class NonFiniteLoss(StageError):
    def __init__(self, epoch, step, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss


class TrialPruned(Exception):
    """Control-flow signal raised by an objective to stop a trial early."""


class AllTrialsPruned(StageError):
    pass


# stacking


class MissingFoldPrediction(StageError):
    def __init__(self, model_id, fold):
        super().__init__(f"no predictions for model {model_id!r}, fold {fold}")
        self.model_id = model_id
        self.fold = fold


class CoverageGap(StageError):
    def __init__(self, sample_id):
        super().__init__(f"sample {sample_id!r} has no out-of-fold prediction")
        self.sample_id = sample_id


class LeakageDetected(StageError):
    def __init__(self, sample_id, model_id):
        super().__init__(
            f"sample {sample_id!r} was predicted by a {model_id!r} model trained on it"
        )
        self.sample_id = sample_id
        self.model_id = model_id


class EmptyForest(ValidationError):
    pass


# taxonomy


class UnknownSourceLabel(ValidationError):
    def __init__(self, name):
        super().__init__(f"source label {name!r} not present in external manifest")
        self.name = name


class UnknownTargetLabel(ValidationError):
    def __init__(self, name):
        super().__init__(f"mapping target {name!r} is not a schema label")
        self.name = name


class EmptyMapping(ValidationError):
    pass


# explain


class EmptyWindow(ValidationError):
    pass


# cli


class IncompleteRun(StageError):
    pass
