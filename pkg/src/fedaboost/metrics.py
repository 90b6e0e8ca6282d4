"""Evaluation: error rates, macro-F1, fairness variance, window statistics.

Fairness is read as uniformity of a per-client performance measure: lower
population variance across clients means a fairer model. A model dominates
another only when it improves the average loss and the variance at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .losses import cross_entropy
from .nn import Batch, ModelParameters, forward, softmax


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # [C, C]; rows = true class, columns = predicted

    def __post_init__(self):
        c = self.counts
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (c < 0).any():
            raise ValueError("confusion matrix entries must be >= 0")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_predictions(cls, y_true: np.ndarray, y_pred: np.ndarray,
                         class_count: int) -> "ConfusionMatrix":
        t = np.asarray(y_true, dtype=np.int64)
        p = np.asarray(y_pred, dtype=np.int64)
        if t.shape != p.shape:
            raise ValueError("y_true and y_pred must have the same length")
        counts = np.zeros((class_count, class_count), dtype=np.int64)
        np.add.at(counts, (t, p), 1)
        return cls(counts=counts)


def predict_labels(model: ModelParameters, features: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties break toward the lowest class index."""
    labels = np.zeros(features.shape[0], dtype=np.int64)
    logits, _ = forward(model, Batch(inputs=features, labels=labels))
    return np.argmax(logits, axis=1)


def error_rate(model: ModelParameters, dataset: Dataset) -> float:
    """Fraction of misclassified examples under argmax prediction."""
    if dataset.n == 0:
        raise ValueError("empty dataset")
    preds = predict_labels(model, dataset.features)
    return float(np.mean(preds != dataset.labels))


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class F1 = 2TP / (2TP + FP + FN).

    A class with no true and no predicted examples contributes 0, the
    usual zero-division convention.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = 2.0 * tp + fp + fn
    f1 = np.divide(2.0 * tp, denom, out=np.zeros_like(denom), where=denom > 0)
    return float(f1.mean())


def present_label_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Macro-F1 restricted to labels present in the truth or the prediction.

    Used for per-client scores: a client is not penalized for classes it
    never holds, which keeps the cross-client variance about model quality
    rather than shard composition.
    """
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    present = np.union1d(t, p)
    remap = np.zeros(int(present.max()) + 1, dtype=np.int64)
    remap[present] = np.arange(present.size)
    cm = ConfusionMatrix.from_predictions(remap[t], remap[p], present.size)
    return macro_f1(cm)


def average_loss(per_client_losses: Sequence[float]) -> float:
    """Arithmetic mean of per-client losses."""
    values = np.asarray(per_client_losses, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty loss vector")
    return float(values.mean())


def performance_variance(per_client_phi: Sequence[float]) -> float:
    """Population variance (divide by k) of a per-client performance measure."""
    values = np.asarray(per_client_phi, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty performance vector")
    return float(values.var())


@dataclass(frozen=True)
class FairnessReport:
    per_client_phi: tuple[float, ...]
    mean_phi: float
    variance: float
    avg_loss: float
    client_ids: tuple[int, ...] | None = None

    @classmethod
    def from_scores(cls, phi: Sequence[float], losses: Sequence[float],
                    client_ids: Sequence[int] | None = None) -> "FairnessReport":
        phi_t = tuple(float(x) for x in phi)
        return cls(
            per_client_phi=phi_t,
            mean_phi=float(np.mean(phi_t)),
            variance=performance_variance(phi_t),
            avg_loss=average_loss(losses),
            client_ids=None if client_ids is None else tuple(int(i) for i in client_ids),
        )


@dataclass(frozen=True)
class FairnessVerdict:
    lower_loss: str  # "a" | "b" | "tie"
    lower_variance: str  # "a" | "b" | "tie"
    dominant: str | None  # strictly better on both criteria, else None


def fairness_compare(report_a: FairnessReport, report_b: FairnessReport) -> FairnessVerdict:
    """Which report wins on average loss, on variance, and on both jointly."""
    if report_a.client_ids is not None and report_b.client_ids is not None:
        if report_a.client_ids != report_b.client_ids:
            raise ValueError("reports cover different client sets")
    elif len(report_a.per_client_phi) != len(report_b.per_client_phi):
        raise ValueError("reports cover different numbers of clients")

    def lower(x: float, y: float) -> str:
        if x < y:
            return "a"
        if y < x:
            return "b"
        return "tie"

    loss_side = lower(report_a.avg_loss, report_b.avg_loss)
    var_side = lower(report_a.variance, report_b.variance)
    dominant = loss_side if loss_side == var_side and loss_side != "tie" else None
    return FairnessVerdict(lower_loss=loss_side, lower_variance=var_side, dominant=dominant)


def window_stats(series: Sequence, window: tuple[int, int]) -> tuple[float, tuple[float, float]]:
    """Mean and 95% normal CI of a per-round statistic over a round window.

    ``series`` holds one entry per round, starting at round 1; scalar
    entries are used directly, vector entries (per-client scores) are
    reduced with performance_variance first. ``window`` is an inclusive
    (start_round, end_round) pair. The CI is mean +- 1.96 * sd / sqrt(n)
    with sample sd (zero width for a single-round window).
    """
    values = [
        performance_variance(entry) if np.ndim(entry) >= 1 else float(entry)
        for entry in series
    ]
    start, end = window
    if start < 1 or end > len(values) or start > end:
        raise ValueError(f"window {window} is empty or outside rounds 1..{len(values)}")
    chunk = np.asarray(values[start - 1:end])
    mean = float(chunk.mean())
    half = 0.0
    if chunk.size > 1:
        half = 1.96 * float(chunk.std(ddof=1)) / math.sqrt(chunk.size)
    return mean, (mean - half, mean + half)
