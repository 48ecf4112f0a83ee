"""Evaluation metrics: accuracy, precision, recall and average precision.

All values are percentages. AP is the weighted sum sum_n (R_n - R_{n-1}) P_n
with thresholds swept over the distinct predicted scores in decreasing
order and R_0 = 0.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import rnn_core
from .features import rescale_batch
from .optim import bce_loss


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    ap: float
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self) -> str:
        """Aligned text table in the usual column order (Acc., P, R, AP)."""
        header = f"{'Acc.':>8} {'P':>8} {'R':>8} {'AP':>8}"
        row = (
            f"{self.accuracy:8.2f} {self.precision:8.2f} "
            f"{self.recall:8.2f} {self.ap:8.2f}"
        )
        return header + "\n" + row


def confusion_at_threshold(
    probs: Sequence[float], labels: Sequence[int], threshold: float = 0.5
) -> tuple[float, float, float]:
    """(accuracy, precision, recall) in percent; prediction is prob >= threshold.

    Precision and recall default to 0 in their degenerate (no predicted /
    no actual positives) cases.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.size == 0:
        raise ValueError("probs and labels must be equal-length and non-empty")
    preds = probs >= threshold
    pos = labels == 1
    tp = int(np.sum(preds & pos))
    accuracy = float(np.mean(preds == pos)) * 100.0
    predicted_pos = int(np.sum(preds))
    precision = 100.0 * tp / predicted_pos if predicted_pos else 0.0
    actual_pos = int(np.sum(pos))
    recall = 100.0 * tp / actual_pos if actual_pos else 0.0
    return accuracy, precision, recall


def average_precision(probs: Sequence[float], labels: Sequence[int]) -> float:
    """AP percentage over the decreasing sweep of distinct predicted scores."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.size == 0:
        raise ValueError("probs and labels must be equal-length and non-empty")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive labels")
    ap = 0.0
    prev_recall = 0.0
    for tau in np.unique(probs)[::-1]:
        preds = probs >= tau
        tp = int(np.sum(preds & (labels == 1)))
        predicted_pos = int(np.sum(preds))
        precision = tp / predicted_pos if predicted_pos else 0.0
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap * 100.0


@dataclass
class EvalOptions:
    threshold: float = 0.5
    rescale: bool = False
    batch_size: int = 64
    #: which horizon's probability enters the metrics in multi-horizon mode
    horizon_index: int = -1


def predict_probs(
    model: rnn_core.Model, dataset: Sequence, options: Optional[EvalOptions] = None
) -> np.ndarray:
    """Eval-mode probabilities for every sample, shape (len(dataset), out_dim)."""
    opts = options or EvalOptions()
    out = []
    for start in range(0, len(dataset), opts.batch_size):
        batch = list(dataset[start : start + opts.batch_size])
        if opts.rescale and batch[0].images is not None:
            scaled = rescale_batch([s.images for s in batch])
            batch = [dataclasses.replace(s, images=img) for s, img in zip(batch, scaled)]
        for sample in batch:
            out.append(rnn_core.model_forward(sample, model, mode="eval"))
    return np.stack(out)


def evaluate(
    model: rnn_core.Model, dataset: Sequence, options: Optional[EvalOptions] = None
) -> Metrics:
    """Run the model over a dataset and compute all four metrics."""
    if not len(dataset):
        raise ValueError("empty dataset")
    opts = options or EvalOptions()
    probs = predict_probs(model, dataset, opts)[:, opts.horizon_index]
    labels = np.asarray([s.label[opts.horizon_index] for s in dataset])
    accuracy, precision, recall = confusion_at_threshold(probs, labels, opts.threshold)
    ap = average_precision(probs, labels)
    return Metrics(accuracy, precision, recall, ap, opts.threshold)
