"""Multilabel stacking pipeline: stratified folds, base learners, pruned search, GBDT meta-ensemble."""

__version__ = "0.1.0"
