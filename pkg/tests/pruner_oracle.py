"""Hand-rolled replay of the median-pruning rule for scripted objectives."""

import statistics


def expected_decisions(scripts, max_epochs, n_startup=5):
    """Given per-trial value scripts, return the epoch each trial is pruned at (or None).

    A trial is stopped at epoch e < max_epochs when at least ``n_startup``
    trials have completed and its value at e is strictly below the median
    of the completed trials' values at e.
    """
    completed = []
    outcome = []
    for script in scripts:
        pruned_at = None
        if len(completed) >= n_startup:
            for e in range(1, max_epochs):
                med = statistics.median(c[e - 1] for c in completed)
                if script[e - 1] < med:
                    pruned_at = e
                    break
        outcome.append(pruned_at)
        if pruned_at is None:
            completed.append(script[:max_epochs])
    return outcome
