"""Synthetic conversion metrics: token edit distance, marker retention, AUC."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from sklearn.metrics import roc_auc_score


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Levenshtein distance between two token sequences.

    Row update: substitutions/deletions are elementwise, insertions are a
    running minimum of ``row[j] - j``.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if len(a) == 0:
        return len(b)
    if len(b) == 0:
        return len(a)
    cols = np.arange(len(b) + 1)
    row = cols.copy()
    for i in range(1, len(a) + 1):
        tmp = np.empty_like(row)
        tmp[0] = i
        tmp[1:] = np.minimum(row[1:] + 1, row[:-1] + (b != a[i - 1]))
        row = np.minimum.accumulate(tmp - cols) + cols
    return int(row[-1])


def normalized_edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> float:
    return edit_distance(hyp, ref) / max(len(ref), 1)


def count_markers(seq: Iterable[int], markers: set[int]) -> int:
    return sum(1 for t in seq if t in markers)


def marker_retention(outputs: Sequence[Sequence[int]], sources: Sequence[Sequence[int]],
                     markers: set[int]) -> float:
    """Markers surviving in the outputs over markers present in the sources."""
    in_src = sum(count_markers(s, markers) for s in sources)
    if in_src == 0:
        return 0.0
    return sum(count_markers(o, markers) for o in outputs) / in_src


def ctp_auc(scores: Sequence[Sequence[float]], labels: Sequence[Sequence[int]]) -> float:
    """ROC AUC of pooled per-token scores against the LCS labels."""
    s = np.concatenate([np.asarray(x, dtype=np.float64) for x in scores])
    y = np.concatenate([np.asarray(x, dtype=np.int64) for x in labels])
    if y.min() == y.max():
        return float("nan")
    return float(roc_auc_score(y, s))
