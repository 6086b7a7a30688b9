"""Binary classification metrics: confusion counts, F1, average precision."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = ["ConfusionCounts", "confusion_counts", "f1_score", "pr_auc", "MetricsReport"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.size == 0:
        raise ValueError("metrics require at least one (score, label) pair")
    if scores.shape != labels.shape:
        raise ValueError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    return scores, labels


def confusion_counts(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    scores, labels = _validate(scores, labels)
    pred = scores > threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & labels)),
        fp=int(np.sum(pred & ~labels)),
        fn=int(np.sum(~pred & labels)),
        tn=int(np.sum(~pred & ~labels)),
    )


def f1_score(scores, labels, threshold: float = 0.5) -> float:
    """F1 = 2PR/(P+R) at the given threshold; 0 when P + R == 0."""
    c = confusion_counts(scores, labels, threshold)
    p, r = c.precision, c.recall
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def pr_auc(scores, labels) -> float:
    """Average precision over the precision-recall curve.

    Step-wise (not trapezoidal): each positive contributes the precision of
    the score-descending prefix that first includes it. Tied scores move
    as one group and every positive in the group receives the precision at
    the end of that group.
    """
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("pr_auc requires at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(np.float64)
    # last index of each tie group
    group_end = np.nonzero(np.append(s[:-1] != s[1:], True))[0]
    cum_tp = np.cumsum(y)[group_end]
    cum_n = group_end + 1.0
    pos_in_group = np.diff(np.concatenate([[0.0], cum_tp]))
    precision = cum_tp / cum_n
    return float(np.sum(precision * pos_in_group) / n_pos)


@dataclass
class MetricsReport:
    """Evaluation summary for one model on one dataset split."""

    pr_auc: float
    f1: float
    precision: float
    recall: float
    counts: ConfusionCounts
    extras: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores, labels, threshold: float = 0.5, **extras) -> "MetricsReport":
        c = confusion_counts(scores, labels, threshold)
        return cls(
            pr_auc=pr_auc(scores, labels),
            f1=f1_score(scores, labels, threshold),
            precision=c.precision,
            recall=c.recall,
            counts=c,
            extras=dict(extras),
        )

    def to_dict(self) -> dict[str, Any]:
        d = {
            "pr_auc": self.pr_auc,
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "fn": self.counts.fn,
            "tn": self.counts.tn,
        }
        d.update(self.extras)
        return d
