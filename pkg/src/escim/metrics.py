"""Rank statistics used by the evaluation suite."""

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].mean() - (n_pos + 1) / 2.0) / n_neg)
