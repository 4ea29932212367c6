from __future__ import annotations
import csv
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from matplotlib.figure import Figure
from pydantic import BaseModel, Field

from ccdet.errors import MetricError
from ccdet.postprocess import Box, ImageVerdict, box_iou

log = logging.getLogger(__name__)

NUM_CLASSES = 2
POSITIVE_CLASS = 1  # APD

Curve = List[Tuple[float, float]]


class IouStats(BaseModel):
    n: int
    mean: float
    median: float
    frac_at_least_05: float = Field(description="share of images whose winning detection has IoU >= 0.5")


class EvalReport(BaseModel):
    n_images: int
    # rows = true class, cols = predicted class; abstains are kept out of the matrix
    confusion: List[List[int]]
    abstained: List[int]
    precision: List[Optional[float]]
    recall: List[Optional[float]]
    f1: List[Optional[float]]
    macro_precision: Optional[float] = None
    macro_recall: Optional[float] = None
    macro_f1: Optional[float] = None
    accuracy: float
    roc: Optional[Curve] = None
    pr: Optional[Curve] = None
    auc: Optional[float] = None
    iou: Optional[IouStats] = None
    notes: List[str] = Field(default_factory=list)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def _f1(p: Optional[float], r: Optional[float]) -> Optional[float]:
    if p is None or r is None:
        return None
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def _mean_defined(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def confusion_and_scores(pairs: Sequence[Tuple[ImageVerdict, int]]) -> EvalReport:
    """
    Confusion matrix and per-class scores from (verdict, true class) pairs.
    An abstain counts against recall of its true class and against accuracy;
    it is nobody's false positive.
    """
    if not pairs:
        raise MetricError("confusion_and_scores needs at least one (verdict, true class) pair")
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    abstained = np.zeros(NUM_CLASSES, dtype=np.int64)
    for verdict, truth in pairs:
        if not 0 <= truth < NUM_CLASSES:
            raise MetricError(f"true class {truth} outside [0, {NUM_CLASSES})")
        if verdict.abstained:
            abstained[truth] += 1
        else:
            confusion[truth, verdict.predicted_class] += 1
    return report_from_counts(confusion, abstained)


def report_from_counts(confusion: np.ndarray, abstained: Optional[np.ndarray] = None) -> EvalReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    abstained = np.zeros(NUM_CLASSES, dtype=np.int64) if abstained is None else np.asarray(abstained)
    if confusion.shape != (NUM_CLASSES, NUM_CLASSES) or (confusion < 0).any():
        raise MetricError(f"confusion must be a non-negative {NUM_CLASSES}x{NUM_CLASSES} matrix")
    total = int(confusion.sum() + abstained.sum())
    if total == 0:
        raise MetricError("empty evaluation")

    tp = np.diag(confusion)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1) + abstained
    precision = [_ratio(int(tp[c]), int(predicted[c])) for c in range(NUM_CLASSES)]
    recall = [_ratio(int(tp[c]), int(actual[c])) for c in range(NUM_CLASSES)]
    f1 = [_f1(p, r) for p, r in zip(precision, recall)]
    return EvalReport(
        n_images=total,
        confusion=confusion.tolist(),
        abstained=abstained.tolist(),
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=_mean_defined(precision),
        macro_recall=_mean_defined(recall),
        macro_f1=_mean_defined(f1),
        accuracy=float(tp.sum()) / total,
    )


# ============================================================
# Threshold sweeps
# ============================================================

def _sweep(scores: Sequence[Tuple[float, int]]) -> Tuple[np.ndarray, np.ndarray, int, int]:
    """Cumulative (tp, fp) at each distinct score, highest first; a threshold keeps score >= t."""
    if not scores:
        raise MetricError("no scores to sweep")
    s = np.array([float(v) for v, _ in scores], dtype=np.float64)
    y = np.array([int(c) == POSITIVE_CLASS for _, c in scores], dtype=bool)
    if np.isnan(s).any() or s.min() < 0.0 or s.max() > 1.0:
        raise MetricError("scores must lie in [0,1]")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"ROC/PR need both classes; got {n_pos} positive and {n_neg} negative samples")

    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_run = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(~y)[last_of_run]
    return tp, fp, n_pos, n_neg


def roc_auc(scores: Sequence[Tuple[float, int]]) -> Tuple[Curve, float]:
    """(fpr, tpr) points from (0,0) to (1,1) and the trapezoidal area under them."""
    tp, fp, n_pos, n_neg = _sweep(scores)
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return [(float(a), float(b)) for a, b in zip(fpr, tpr)], auc


def pr_curve(scores: Sequence[Tuple[float, int]]) -> Curve:
    """(recall, precision) per distinct threshold, highest threshold first."""
    tp, fp, n_pos, _ = _sweep(scores)
    return [(float(t / n_pos), float(t / (t + f))) for t, f in zip(tp, fp)]


def detection_iou_stats(pairs: Sequence[Tuple[Optional[Box], Box]]) -> IouStats:
    """IoU of each image's winning detection against its gt box; None (abstain) scores 0."""
    if not pairs:
        return IouStats(n=0, mean=0.0, median=0.0, frac_at_least_05=0.0)
    ious = np.array([0.0 if det is None else box_iou(det, gt) for det, gt in pairs])
    return IouStats(n=len(ious), mean=float(ious.mean()), median=float(np.median(ious)),
                    frac_at_least_05=float((ious >= 0.5).mean()))


# ============================================================
# Writers
# ============================================================

def write_report_json(report: EvalReport, path: Path) -> Path:
    path = Path(path)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path


def _write_curve_csv(points: Curve, header: Tuple[str, str], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(points)


def _plot_curve(points: Curve, xlabel: str, ylabel: str, title: str, path: Path,
                diagonal: bool = False) -> None:
    fig = Figure(figsize=(4.0, 4.0))
    ax = fig.add_subplot(1, 1, 1)
    xs, ys = zip(*points)
    ax.plot(xs, ys, color="tab:blue", linewidth=1.5, marker="." if len(xs) < 30 else None)
    if diagonal:
        ax.plot([0, 1], [0, 1], color="0.6", linestyle="--", linewidth=0.8)
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.set_aspect("equal")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, linewidth=0.3)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})


def write_curves(report: EvalReport, out_dir: Path) -> List[Path]:
    """roc.csv / pr.csv plus their SVG plots; nothing when the curves were refused."""
    out_dir = Path(out_dir)
    written: List[Path] = []
    if report.roc:
        _write_curve_csv(report.roc, ("fpr", "tpr"), out_dir / "roc.csv")
        _plot_curve(report.roc, "false positive rate", "true positive rate",
                    f"ROC (AUC = {report.auc:.3f})", out_dir / "roc.svg", diagonal=True)
        written += [out_dir / "roc.csv", out_dir / "roc.svg"]
    if report.pr:
        _write_curve_csv(report.pr, ("recall", "precision"), out_dir / "pr.csv")
        _plot_curve(report.pr, "recall", "precision", "Precision-Recall", out_dir / "pr.svg")
        written += [out_dir / "pr.csv", out_dir / "pr.svg"]
    return written
