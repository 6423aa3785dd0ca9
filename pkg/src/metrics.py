import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.metrics import multilabel_confusion_matrix

from .errors import ShapeError

METRIC_NAMES = ("precision", "recall", "f1", "accuracy")
MACRO = "macro"
THRESHOLD_GRID = np.round(np.arange(1, 20) * 0.05, 2)  # 0.05 .. 0.95
DEFAULT_THRESHOLD = 0.5


def _ratio(num: float, den: float, empty: float) -> float:
    return num / den if den else empty


def binary_metrics(tp: int, fp: int, fn: int, tn: int) -> Dict[str, float]:
    """Precision, recall, F1 and accuracy of one class from its confusion counts.

    A class with nothing to find and nothing predicted scores 1.0 on precision
    and recall.
    """
    precision = _ratio(tp, tp + fp, 1.0 if fn == 0 else 0.0)
    recall = _ratio(tp, tp + fn, 1.0 if fp == 0 else 0.0)
    f1 = _ratio(2 * precision * recall, precision + recall, 0.0)
    accuracy = _ratio(tp + tn, tp + fp + fn + tn, 0.0)
    return {"precision": precision, "recall": recall, "f1": f1, "accuracy": accuracy}


@dataclass
class MetricsReport:
    """Per-class precision/recall/F1/accuracy plus a macro-average row."""

    table: pd.DataFrame  # index: class names + MACRO, columns: METRIC_NAMES

    @property
    def macro_f1(self) -> float:
        return float(self.table.loc[MACRO, "f1"])

    @property
    def classes(self) -> List[str]:
        return [c for c in self.table.index if c != MACRO]

    def to_text(self) -> str:
        body = self.table.to_string(float_format=lambda v: f"{v:.4f}")
        return f"averages are macro (unweighted mean over classes)\n{body}\n"

    def long_format(self, fold: Union[int, str]) -> pd.DataFrame:
        stacked = self.table.stack().reset_index()
        stacked.columns = ["class", "metric", "value"]
        stacked.insert(0, "fold", fold)
        return stacked


def compute_metrics(y_true: np.ndarray, y_pred: np.ndarray, classes: Sequence[str]) -> MetricsReport:
    """Build a MetricsReport from boolean [N, C] truth and prediction matrices."""
    y_true = np.asarray(y_true, dtype=bool)
    y_pred = np.asarray(y_pred, dtype=bool)
    if y_true.shape != y_pred.shape or y_true.ndim != 2 or y_true.shape[1] != len(classes):
        raise ShapeError(f"truth {y_true.shape} and prediction {y_pred.shape} must both be [N, {len(classes)}]")
    if y_true.shape[0] == 0:
        raise ShapeError("cannot compute metrics on an empty split")
    confusion = multilabel_confusion_matrix(y_true.astype(int), y_pred.astype(int), labels=list(range(len(classes))))
    rows = {}
    for name, ((tn, fp), (fn, tp)) in zip(classes, confusion):
        rows[name] = binary_metrics(int(tp), int(fp), int(fn), int(tn))
    table = pd.DataFrame.from_dict(rows, orient="index", columns=list(METRIC_NAMES))
    table.loc[MACRO] = table.mean(axis=0)
    return MetricsReport(table=table)


def average_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    if not reports:
        raise ShapeError("no reports to average")
    stacked = pd.concat([r.table for r in reports], keys=range(len(reports)))
    return MetricsReport(table=stacked.groupby(level=1, sort=False).mean())


def write_metrics(reports: Dict[Union[int, str], MetricsReport], path) -> Path:
    """Write one ``fold,class,metric,value`` line per metric."""
    path = Path(path)
    frame = pd.concat([report.long_format(fold) for fold, report in reports.items()], ignore_index=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    logging.info(f"Wrote {len(frame)} metric lines to {path}")
    return path


def read_metrics(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"fold": str})


def f1_at_thresholds(probs: np.ndarray, labels: np.ndarray, grid: np.ndarray = THRESHOLD_GRID) -> np.ndarray:
    """F1 of one class at every grid threshold (prediction: prob >= threshold)."""
    labels = np.asarray(labels, dtype=bool)
    predicted = probs[None, :] >= grid[:, None]
    tp = (predicted & labels).sum(axis=1)
    fp = (predicted & ~labels).sum(axis=1)
    fn = (~predicted & labels).sum(axis=1)
    den = 2 * tp + fp + fn
    return np.where(den > 0, 2 * tp / np.maximum(den, 1), 0.0)


def threshold_search(val_probs: np.ndarray, val_labels: np.ndarray,
                     grid: np.ndarray = THRESHOLD_GRID) -> np.ndarray:
    """Per-class threshold on ``grid`` maximizing validation F1; ties go to the lowest threshold.

    A class with no positive validation label keeps ``DEFAULT_THRESHOLD``.
    """
    val_probs = np.asarray(val_probs, dtype=np.float64)
    val_labels = np.asarray(val_labels, dtype=bool)
    if val_probs.shape != val_labels.shape or val_probs.ndim != 2:
        raise ShapeError(f"probabilities {val_probs.shape} and labels {val_labels.shape} must both be [N, C]")
    thresholds = np.full(val_probs.shape[1], DEFAULT_THRESHOLD)
    for c in range(val_probs.shape[1]):
        if not val_labels[:, c].any():
            logging.warning(f"Class {c} has no positive validation records; threshold defaults to {DEFAULT_THRESHOLD}")
            continue
        scores = f1_at_thresholds(val_probs[:, c], val_labels[:, c], grid)
        thresholds[c] = grid[int(np.argmax(scores))]
    return thresholds
