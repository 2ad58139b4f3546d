"""Binary classification metrics: accuracy, F1 and Matthews correlation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check(preds, golds) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds)
    g = np.asarray(golds)
    if p.shape != g.shape or p.ndim != 1:
        raise ValueError(f"preds {p.shape} and golds {g.shape} must be 1-D and equal length")
    if p.size == 0:
        raise ValueError("no examples to score")
    return p, g


def confusion(preds, golds, positive_class: int = 1) -> ConfusionCounts:
    p, g = _check(preds, golds)
    pp, gp = p == positive_class, g == positive_class
    return ConfusionCounts(int((pp & gp).sum()), int((pp & ~gp).sum()),
                           int((~pp & ~gp).sum()), int((~pp & gp).sum()))


def accuracy(preds, golds) -> float:
    p, g = _check(preds, golds)
    return float((p == g).mean())


def f1_binary(preds, golds, positive_class: int = 1) -> float:
    c = confusion(preds, golds, positive_class)
    # 2PR/(P+R) == 2tp/(2tp+fp+fn); zero when there are no true positives.
    if c.tp == 0:
        return 0.0
    return 2 * c.tp / (2 * c.tp + c.fp + c.fn)


def matthews_corr(preds, golds) -> float:
    p, g = _check(preds, golds)
    if not (np.isin(p, (0, 1)).all() and np.isin(g, (0, 1)).all()):
        raise ValueError("matthews_corr expects binary 0/1 labels")
    c = confusion(p, g)
    denom = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if denom == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom)


def classification_report(preds, golds) -> dict[str, float]:
    return {"accuracy": accuracy(preds, golds),
            "f1": f1_binary(preds, golds),
            "mcc": matthews_corr(preds, golds)}
