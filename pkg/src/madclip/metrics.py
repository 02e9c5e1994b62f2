"""Image-level and pixel-level AUROC (Mann-Whitney with tie-averaged ranks)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import InputError, UndefinedMetricError


@dataclass
class EvalRecord:
    score: float
    label: int
    map: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None


def auroc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise InputError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.isin(y, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    if len(maps) != len(masks):
        raise InputError("need one mask per map")
    for m, k in zip(maps, masks):
        if np.shape(m) != np.shape(k):
            raise InputError(f"map {np.shape(m)} and mask {np.shape(k)} differ in shape")
    s = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    y = np.concatenate([(np.asarray(k) > 0).astype(np.int64).ravel() for k in masks])
    return auroc(s, y)


def as_percent(value: Optional[float]) -> str:
    return "" if value is None else f"{100.0 * value:.2f}"
