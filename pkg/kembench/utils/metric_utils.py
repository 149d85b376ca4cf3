import logging
import math
from typing import Sequence

import numpy as np

from kembench.exceptions import ContractError, DimensionError
from kembench.models import TaskScore

logger = logging.getLogger(__name__)


def miou(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> float:
    """Mean of TP/(TP+FP+FN) over classes present in truth or prediction."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise DimensionError(f"miou: prediction {pred.shape} and truth {truth.shape} differ")
    for name, labels in (("prediction", pred), ("truth", truth)):
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ContractError(f"miou: {name} label outside [0, {n_classes})")

    confusion = np.bincount(truth.reshape(-1) * n_classes + pred.reshape(-1),
                            minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(confusion).astype(np.float64)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp
    union = tp + fp + fn
    present = union > 0
    if not present.any():
        raise ContractError("miou: no class occurs in truth or prediction")
    return float(np.mean(tp[present] / union[present]))


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.size == 0:
        raise ContractError("rmse of an empty sequence")
    if pred.shape != truth.shape:
        raise DimensionError(f"rmse: lengths {pred.size} and {truth.size} differ")
    return float(math.sqrt(np.mean((pred - truth) ** 2)))


def delta_m(mtl_scores: Sequence[TaskScore], stl_scores: Sequence[TaskScore]) -> float:
    """Average signed relative gain of multi-task over single-task scores.

    Positive means the multi-task model is better on average; lower-is-better
    tasks have their sign flipped.
    """
    if len(mtl_scores) != len(stl_scores) or not mtl_scores:
        raise ContractError("delta_m needs equally many (non-zero) multi-task and single-task scores")
    total = 0.0
    for mtl, stl in zip(mtl_scores, stl_scores):
        if mtl.lower_is_better != stl.lower_is_better:
            raise ContractError("delta_m: direction flags disagree between MTL and STL scores")
        if stl.value == 0:
            raise ContractError("delta_m: single-task score of zero")
        sign = -1.0 if stl.lower_is_better else 1.0
        total += sign * (mtl.value - stl.value) / stl.value
    return total / len(mtl_scores)


def accuracy(pred_classes: Sequence[int], truth_classes: Sequence[int]) -> float:
    pred = np.asarray(pred_classes).reshape(-1)
    truth = np.asarray(truth_classes).reshape(-1)
    if truth.size == 0:
        raise ContractError("accuracy of an empty sequence")
    if pred.shape != truth.shape:
        raise DimensionError(f"accuracy: lengths {pred.size} and {truth.size} differ")
    return float(np.mean(pred == truth))
