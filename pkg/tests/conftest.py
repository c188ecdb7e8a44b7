import numpy as np
import pytest

from retinastack.core import CANONICAL_LABELS, BinaryLabelMatrix


def make_truth(values, labels=None, prefix="s"):
    values = np.asarray(values, dtype=np.int8)
    if values.ndim == 1:
        values = values[:, None]
    labels = tuple(labels) if labels is not None else CANONICAL_LABELS[: values.shape[1]]
    ids = tuple(f"{prefix}{i:05d}" for i in range(values.shape[0]))
    return BinaryLabelMatrix(ids, values, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
