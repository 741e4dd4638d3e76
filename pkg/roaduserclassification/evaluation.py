"""
Test set evaluation: confusion matrices and F1 scores of the final-timestep
predictions, and per-timestep error ratios.

A prediction is the argmax of a probability row; ties go to the lowest
class index.
"""

import json
import logging
import pathlib
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn import metrics

from roaduserclassification.errors import EvaluationError
from roaduserclassification.feature_pipeline import FeatureSequence
from roaduserclassification.neural_core import (
    NUM_CLASSES,
    Network,
    forward_batch,
    stack_sequences,
)
from roaduserclassification.trajectory_model import CLASS_LABELS, RoadUserClass

logger = logging.getLogger(__name__)

PREDICT_BATCH_SIZE = 256


@dataclass(frozen=True)
class ConfusionMatrix:
    """4 x 4 counts, rows are the true class and columns the predicted one"""

    counts: np.ndarray

    def __post_init__(self) -> None:
        if self.counts.shape != (NUM_CLASSES, NUM_CLASSES):
            raise EvaluationError(f"confusion matrix must be 4 x 4, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise EvaluationError("confusion matrix counts must be non-negative")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]]) -> "ConfusionMatrix":
        return cls(np.array(rows, dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def column_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def to_rows(self) -> List[List[int]]:
        return [[int(x) for x in row] for row in self.counts]


@dataclass(frozen=True)
class F1Report:
    per_class: np.ndarray  # F1 in RoadUserClass order
    macro: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_class": {
                label: float(f1) for label, f1 in zip(CLASS_LABELS, self.per_class)
            },
            "macro_f1": self.macro,
        }


@dataclass(frozen=True)
class ErrorCurve:
    """ratios[t - 1, c]: share of class c sequences misclassified at timestep t"""

    ratios: np.ndarray

    @property
    def steps(self) -> int:
        return self.ratios.shape[0]

    def for_class(self, road_user_class: RoadUserClass) -> np.ndarray:
        return self.ratios[:, int(road_user_class)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.ratios, columns=list(CLASS_LABELS))
        frame.insert(0, "timestep", np.arange(1, self.steps + 1))
        return frame


# Reference 2 s models on recorded data, rows in RoadUserClass order
REFERENCE_CONFUSION_MATRICES: Dict[str, ConfusionMatrix] = {
    "stride2_win30": ConfusionMatrix.from_rows(
        [[92, 0, 0, 1], [2, 106, 0, 7], [0, 1, 62, 32], [0, 2, 42, 109]]
    ),
    "stride2_win60": ConfusionMatrix.from_rows(
        [[45, 0, 0, 0], [0, 53, 0, 3], [0, 0, 33, 13], [0, 3, 8, 60]]
    ),
    "stride2_win120": ConfusionMatrix.from_rows(
        [[20, 1, 0, 0], [0, 28, 0, 0], [0, 0, 15, 6], [0, 0, 3, 26]]
    ),
}


def predict_classes(probs: np.ndarray) -> np.ndarray:
    """Argmax over the last axis, np.argmax keeps the first maximum"""
    return np.argmax(probs, axis=-1)


def predict_probabilities(
    net: Network, sequences: Sequence[FeatureSequence]
) -> np.ndarray:
    """(N, T, 4) probabilities of equal-length sequences"""
    if len(sequences) == 0:
        raise EvaluationError("test set is empty")
    lengths = {len(x) for x in sequences}
    if len(lengths) != 1:
        raise EvaluationError(f"test sequences differ in length: {sorted(lengths)}")

    chunks = []
    for start in range(0, len(sequences), PREDICT_BATCH_SIZE):
        x, _ = stack_sequences(list(sequences[start : start + PREDICT_BATCH_SIZE]))
        chunks.append(forward_batch(net, x))
    return np.concatenate(chunks, axis=0)


def _true_labels(sequences: Sequence[FeatureSequence]) -> np.ndarray:
    return np.array([int(x.label) for x in sequences], dtype=np.int64)


def confusion_matrix_from_predictions(
    y_true: np.ndarray, y_pred: np.ndarray
) -> ConfusionMatrix:
    if len(y_true) == 0:
        raise EvaluationError("cannot build a confusion matrix from zero predictions")
    counts = metrics.confusion_matrix(y_true, y_pred, labels=list(range(NUM_CLASSES)))
    return ConfusionMatrix(counts.astype(np.int64))


def confusion_matrix_from_probabilities(
    probs: np.ndarray, y_true: np.ndarray
) -> ConfusionMatrix:
    """probs is (N, T, 4), the last timestep decides"""
    probs = np.asarray(probs)
    if probs.ndim != 3 or probs.shape[0] != len(y_true):
        raise EvaluationError(
            f"expected (N, T, 4) probabilities for {len(y_true)} sequences, "
            f"got {probs.shape}"
        )
    return confusion_matrix_from_predictions(
        np.asarray(y_true), predict_classes(probs[:, -1, :])
    )


def confusion_matrix(net: Network, test: Sequence[FeatureSequence]) -> ConfusionMatrix:
    probs = predict_probabilities(net, test)
    cm = confusion_matrix_from_probabilities(probs, _true_labels(test))
    logger.debug(f"Confusion matrix over {cm.total} sequences: {cm.to_rows()}")
    return cm


def f1_report(cm: ConfusionMatrix) -> F1Report:
    """Per class F1 from precision and recall, 0 where a denominator is 0"""
    diagonal = np.diag(cm.counts).astype(np.float64)
    column_sums = cm.column_sums().astype(np.float64)
    row_sums = cm.row_sums().astype(np.float64)

    per_class = np.zeros(NUM_CLASSES)
    for c in range(NUM_CLASSES):
        if column_sums[c] == 0 or row_sums[c] == 0:
            continue
        precision = diagonal[c] / column_sums[c]
        recall = diagonal[c] / row_sums[c]
        if precision + recall == 0:
            continue
        per_class[c] = 2 * precision * recall / (precision + recall)

    return F1Report(per_class=per_class, macro=float(per_class.mean()))


def error_rate_curve_from_probabilities(
    probs: np.ndarray, y_true: np.ndarray
) -> ErrorCurve:
    """Classes without test sequences get a ratio of 0 at every timestep"""
    probs = np.asarray(probs)
    y_true = np.asarray(y_true)
    if probs.ndim != 3 or probs.shape[0] != len(y_true) or len(y_true) == 0:
        raise EvaluationError(
            f"expected (N, T, 4) probabilities for {len(y_true)} sequences, "
            f"got {probs.shape}"
        )

    wrong = predict_classes(probs) != y_true[:, np.newaxis]  # (N, T)
    ratios = np.zeros((probs.shape[1], NUM_CLASSES))
    for c in range(NUM_CLASSES):
        members = y_true == c
        count = int(members.sum())
        if count > 0:
            ratios[:, c] = wrong[members].sum(axis=0) / count
    return ErrorCurve(ratios)


def error_rate_curve(net: Network, test: Sequence[FeatureSequence]) -> ErrorCurve:
    probs = predict_probabilities(net, test)
    return error_rate_curve_from_probabilities(probs, _true_labels(test))


def write_eval_json(
    cm: ConfusionMatrix,
    report: F1Report,
    path: pathlib.Path,
    meta: Optional[Dict[str, Any]] = None,
) -> None:
    summary: Dict[str, Any] = {
        "classes": list(CLASS_LABELS),
        "confusion_matrix": cm.to_rows(),
        "test_count": cm.total,
        **report.to_dict(),
    }
    if meta:
        summary["meta"] = meta
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_error_curve_csv(curve: ErrorCurve, path: pathlib.Path) -> None:
    curve.to_frame().to_csv(path, index=False, lineterminator="\n")


def write_gnuplot_data(curve: ErrorCurve, path: pathlib.Path) -> None:
    """Whitespace separated columns with a commented header"""
    header = "# " + " ".join(["timestep", *CLASS_LABELS]) + "\n"
    body = curve.to_frame().to_csv(
        sep=" ", index=False, header=False, lineterminator="\n"
    )
    path.write_text(header + body, encoding="utf-8")


def plot_error_curve(curve: ErrorCurve, path: pathlib.Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots()
    steps = np.arange(1, curve.steps + 1)
    for road_user_class in RoadUserClass:
        ax.plot(steps, curve.for_class(road_user_class), label=road_user_class.label)

    ax.set_xlabel("timestep")
    ax.set_ylabel("ratio of misclassified sequences")
    ax.set_ylim(0, 1)
    ax.legend()

    plt.title(title)
    plt.savefig(path, dpi=150)
    plt.close(fig)
