"""Edge labels, point and edge losses, and segmentation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphLayer

PRED_CLAMP = 1e-12


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float | str = "auto"
    include_self_edges: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha != "auto":
            self.alpha = float(self.alpha)
            if self.alpha <= 0:
                raise ValueError("alpha must be positive (or 'auto')")


def edge_labels(graph: GraphLayer, labels) -> np.ndarray:
    """1 where both endpoints share a class, else 0.

    ``labels`` are indexed like the cloud the graph's ``point_indices`` refer to.
    """
    if labels is None:
        raise ValueError("edge labels need point labels")
    labels = np.asarray(labels)
    local = labels[graph.point_indices]
    return (local[graph.src] == local[graph.dst]).astype(np.float64)


def point_loss(scores: Tensor, labels) -> Tensor:
    """Mean cross entropy of row scores against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = ad.log_softmax_rows(scores)
    return ad.scale(ad.mean_all(ad.pick(logp, labels)), -1.0)


def resolve_alpha(alpha, labels) -> float:
    if alpha == "auto":
        labels = np.asarray(labels)
        pos = float(np.sum(labels == 1))
        neg = float(np.sum(labels == 0))
        return pos / max(1.0, neg)
    return float(alpha)


def edge_loss(preds: Tensor, labels, alpha=1.0) -> Tensor:
    """Class-balanced binary cross entropy averaged over all edges.

    ``alpha`` scales the inconsistent-edge term; ``"auto"`` uses the ratio of
    consistent to inconsistent edges in ``labels``.
    """
    preds = ad.as_tensor(preds)
    y = np.asarray(labels, dtype=np.float64).reshape(preds.shape)
    a = resolve_alpha(alpha, y)
    p = ad.clip(preds, PRED_CLAMP, 1.0 - PRED_CLAMP)
    q = ad.sub(Tensor(np.ones(preds.shape)), p)
    term = ad.add(ad.mul(Tensor(y), ad.log(p)), ad.mul(Tensor(a * (1.0 - y)), ad.log(q)))
    return ad.scale(ad.mean_all(term), -1.0)


def total_loss(lp: Tensor, le: Tensor, weights: LossWeights) -> Tensor:
    return ad.add(ad.scale(lp, weights.lambda1), ad.scale(le, weights.lambda2))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalAccumulator:
    num_classes: int
    confusion: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.confusion is None:
            self.confusion = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def add(self, pred, truth) -> None:
        pred = np.asarray(pred, dtype=np.int64)
        truth = np.asarray(truth, dtype=np.int64)
        if pred.shape != truth.shape:
            raise ValueError("prediction and label shapes differ")
        c = self.num_classes
        self.confusion += np.bincount(truth * c + pred, minlength=c * c).reshape(c, c)

    def merge(self, other: "EvalAccumulator") -> "EvalAccumulator":
        return EvalAccumulator(self.num_classes, self.confusion + other.confusion)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


@dataclass
class Metrics:
    oa: float
    macc: float
    miou: float
    class_acc: np.ndarray  # nan for classes absent from ground truth
    class_iou: np.ndarray


def metrics(acc: EvalAccumulator | np.ndarray) -> Metrics:
    """Overall accuracy, class-mean accuracy and class-mean IoU.

    Rows of the confusion matrix are ground truth. Classes with no ground
    truth points are left out of both class means.
    """
    cm = acc.confusion if isinstance(acc, EvalAccumulator) else np.asarray(acc)
    total = cm.sum()
    if total <= 0:
        raise ValueError("no points evaluated")
    diag = np.diag(cm).astype(np.float64)
    rows = cm.sum(axis=1).astype(np.float64)
    cols = cm.sum(axis=0).astype(np.float64)
    present = rows > 0
    class_acc = np.full(len(cm), np.nan)
    class_iou = np.full(len(cm), np.nan)
    class_acc[present] = diag[present] / rows[present]
    class_iou[present] = diag[present] / (rows + cols - diag)[present]
    return Metrics(
        oa=float(diag.sum() / total),
        macc=float(class_acc[present].mean()),
        miou=float(class_iou[present].mean()),
        class_acc=class_acc,
        class_iou=class_iou,
    )


def format_metrics(m: Metrics, class_names=None, extra: dict | None = None) -> str:
    """Plain-text report: per-class table followed by the aggregates, 4 decimals."""
    n = len(m.class_acc)
    names = class_names or [f"class_{i}" for i in range(n)]
    width = max(8, max(len(s) for s in names))
    lines = [f"{'class':<{width}}  {'IoU':>8}  {'Acc':>8}"]
    for name, iou, acc in zip(names, m.class_iou, m.class_acc):
        fmt = lambda v: "     n/a" if np.isnan(v) else f"{v:8.4f}"
        lines.append(f"{name:<{width}}  {fmt(iou)}  {fmt(acc)}")
    lines.append("")
    lines.append(f"OA    {m.oa:.4f}")
    lines.append(f"mAcc  {m.macc:.4f}")
    lines.append(f"mIoU  {m.miou:.4f}")
    for key, value in (extra or {}).items():
        lines.append(f"{key}  {value:.4f}")
    return "\n".join(lines) + "\n"
