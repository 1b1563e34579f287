"""Classification and segmentation metrics, plus the JSON-serialisable report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError, UndefinedMetricError


def accuracy(predictions, labels) -> float:
    """Fraction of rows whose argmax matches the label.

    ``predictions`` is either an [n, K] score matrix (ties go to the lowest
    index, as ``np.argmax`` does) or a vector of predicted class indices.
    """
    pred = np.asarray(predictions)
    labels = np.asarray(labels)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    if pred.shape != labels.shape:
        raise DimensionError(f"accuracy: {pred.shape[0]} predictions vs {labels.shape[0]} labels")
    if labels.size == 0:
        raise ContractError("accuracy: empty input")
    return float((pred == labels).mean())


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of ROC AUC: P(score_pos > score_neg), ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError(f"auc: scores {scores.shape} vs labels {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("auc: labels must be binary")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("auc: need at least one positive and one negative sample")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    not_above = np.searchsorted(neg_sorted, pos, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return float(wins / (pos.size * neg.size))


def dice_iou(mask_a, mask_b) -> tuple[float, float]:
    a = np.asarray(mask_a)
    b = np.asarray(mask_b)
    if a.shape != b.shape:
        raise DimensionError(f"dice_iou: mask shapes {a.shape} and {b.shape} differ")
    if not (np.isin(a, (0, 1)).all() and np.isin(b, (0, 1)).all()):
        raise ContractError("dice_iou: masks must be binary")
    a = a.astype(bool)
    b = b.astype(bool)
    inter = int((a & b).sum())
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0, 1.0
    union = int((a | b).sum())
    return 2.0 * inter / total, inter / union


@dataclass
class MetricsReport:
    accuracy: float
    auc: Optional[float]
    n: int
    arm: str
    domain: str
    dice: Optional[float] = None
    iou: Optional[float] = None
    tr_mode: Optional[str] = None

    def __post_init__(self):
        if self.n <= 0:
            raise ContractError("metrics report needs at least one sample")
        for key in ("accuracy", "auc", "dice", "iou"):
            val = getattr(self, key)
            if val is not None and not 0.0 <= val <= 1.0:
                raise ContractError(f"{key}={val} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
