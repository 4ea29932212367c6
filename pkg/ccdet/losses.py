from __future__ import annotations
import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from ccdet import ndtensor as nd
from ccdet.detector import DetectorConfig, RawPrediction
from ccdet.errors import LossError
from ccdet.ndtensor import Tensor

log = logging.getLogger(__name__)

ANCHOR_RATIO_THRESHOLD = 4.0
_V_SCALE = 4.0 / math.pi ** 2
_EPS = 1e-9


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    box: float = 0.05
    obj: float = 1.0
    cls: float = 0.5

    @field_validator("box", "obj", "cls")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"loss weights must be >= 0, got {v}")
        return v


class GroundTruth(NamedTuple):
    batch_index: int
    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float


class Assignment(NamedTuple):
    batch_index: int
    anchor_index: int
    cell_y: int
    cell_x: int
    box: Tuple[float, float, float, float]
    class_id: int


@dataclass
class TargetAssignment:
    scales: List[List[Assignment]]
    unassigned: List[int] = field(default_factory=list)  # indices into the gt list

    @property
    def count(self) -> int:
        return sum(len(s) for s in self.scales)


@dataclass
class LossBreakdown:
    box_loss: float
    obj_loss: float
    cls_loss: float
    total: float
    weights: Tuple[float, float, float]
    total_tensor: Optional[Tensor] = None  # differentiable total, feed to backward()


# ============================================================
# CIoU
# ============================================================

def ciou_tensor(pred: Sequence[Tensor], target: np.ndarray) -> Tensor:
    """
    Elementwise CIoU of predicted boxes (x1, y1, x2, y2 tensors of shape (n,))
    against constant target boxes (n, 4). Differentiable w.r.t. the prediction,
    including through α.
    """
    px1, py1, px2, py2 = pred
    dtype = px1.dtype
    t = np.asarray(target, dtype=dtype)
    tx1, ty1, tx2, ty2 = (np.ascontiguousarray(t[:, i]) for i in range(4))
    tw, th = tx2 - tx1, ty2 - ty1

    iw = nd.clamp_min(nd.minimum(px2, tx2) - nd.maximum(px1, tx1), 0.0)
    ih = nd.clamp_min(nd.minimum(py2, ty2) - nd.maximum(py1, ty1), 0.0)
    inter = iw * ih
    pw, ph = px2 - px1, py2 - py1
    union = pw * ph + (tw * th) - inter
    iou = inter / union

    cw = nd.maximum(px2, tx2) - nd.minimum(px1, tx1)
    ch = nd.maximum(py2, ty2) - nd.minimum(py1, ty1)
    c2 = cw * cw + ch * ch
    dx = (px1 + px2) - (tx1 + tx2)
    dy = (py1 + py2) - (ty1 + ty2)
    rho2 = (dx * dx + dy * dy) * 0.25

    d_atan = np.arctan(tw / (th + _EPS)) - nd.atan(pw / (ph + _EPS))
    v = d_atan * d_atan * _V_SCALE
    alpha = v / ((1.0 - iou) + v + _EPS)
    return iou - rho2 / c2 - alpha * v


def _check_box(box: Sequence[float], label: str) -> None:
    if len(box) != 4:
        raise LossError(f"{label}: expected (x1, y1, x2, y2), got {box!r}")
    if box[2] - box[0] <= 0 or box[3] - box[1] <= 0:
        raise LossError(f"{label}: degenerate box {tuple(box)} (width and height must be > 0)")


def ciou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """CIoU of two (x1, y1, x2, y2) boxes, in (-1, 1]."""
    _check_box(box_a, "box_a")
    _check_box(box_b, "box_b")
    pred = [Tensor(np.array([c], dtype=np.float64)) for c in box_a]
    return ciou_tensor(pred, np.array([box_b], dtype=np.float64)).item()


# ============================================================
# BCE
# ============================================================

def _bce_terms(logit: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=logit.dtype)
    if target.shape != logit.shape:
        raise LossError(f"bce: logit shape {logit.shape} != target shape {target.shape}")
    if target.size and (target.min() < 0.0 or target.max() > 1.0):
        raise LossError(f"bce: targets must lie in [0,1], got range [{target.min()}, {target.max()}]")
    # -[t log σ(x) + (1-t) log(1-σ(x))] == softplus(x) - t·x
    return nd.softplus(logit) - logit * target


def bce(logit: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross entropy on logits (scalar tensor)."""
    return nd.mean(_bce_terms(logit, target))


# ============================================================
# Target assignment
# ============================================================

def assign_targets(gt: Sequence[GroundTruth], config: DetectorConfig,
                   ratio_threshold: float = ANCHOR_RATIO_THRESHOLD) -> TargetAssignment:
    """
    Anchor a at scale s takes a box iff max(w/aw, aw/w, h/ah, ah/h) < ratio_threshold.
    Each match covers the containing cell plus the nearest x- and y-neighbour cells.
    """
    scales: List[List[Assignment]] = [[] for _ in config.strides]
    unassigned: List[int] = []
    for gi, g in enumerate(gt):
        w, h = g.x2 - g.x1, g.y2 - g.y1
        if w <= 0 or h <= 0:
            unassigned.append(gi)
            continue
        cx, cy = (g.x1 + g.x2) / 2, (g.y1 + g.y2) / 2
        box = (float(g.x1), float(g.y1), float(g.x2), float(g.y2))
        matched = False
        for si, stride in enumerate(config.strides):
            n = config.grid_size(si)
            gx, gy = cx / stride, cy / stride
            col = min(max(int(math.floor(gx)), 0), n - 1)
            row = min(max(int(math.floor(gy)), 0), n - 1)
            nx = col - 1 if gx - col <= 0.5 else col + 1
            ny = row - 1 if gy - row <= 0.5 else row + 1
            cells = [(row, col)]
            if 0 <= nx < n:
                cells.append((row, nx))
            if 0 <= ny < n:
                cells.append((ny, col))
            for ai, (aw, ah) in enumerate(config.anchors[si]):
                if max(w / aw, aw / w, h / ah, ah / h) >= ratio_threshold:
                    continue
                matched = True
                for r, c in cells:
                    scales[si].append(Assignment(g.batch_index, ai, r, c, box, g.class_id))
        if not matched:
            unassigned.append(gi)
    if unassigned:
        log.warning("%d ground-truth box(es) matched no anchor: %s", len(unassigned), unassigned)
    return TargetAssignment(scales, unassigned)


# ============================================================
# Total loss
# ============================================================

def total_loss(raw: RawPrediction, assignment: TargetAssignment, config: DetectorConfig,
               weights: Optional[LossWeights] = None) -> LossBreakdown:
    """
    box = mean over assignments of (1 - CIoU), cls = BCE over assigned class logits (one-vs-rest),
    obj = BCE over every anchor-cell, target 1 at assigned cells. total = Σ λ·component.
    """
    weights = weights or LossWeights()
    dtype = raw.scales[0].dtype
    box_sum: Optional[Tensor] = None
    cls_sum: Optional[Tensor] = None
    obj_sum: Optional[Tensor] = None
    n_box = n_cls = n_obj = 0

    for si, pred in enumerate(raw.scales):
        n, a, k, gh, gw = pred.shape
        stride = float(config.strides[si])
        obj_target = np.zeros((n, a, gh, gw), dtype=dtype)
        entries = assignment.scales[si]
        if entries:
            b = np.array([e.batch_index for e in entries])
            ai = np.array([e.anchor_index for e in entries])
            gy = np.array([e.cell_y for e in entries])
            gx = np.array([e.cell_x for e in entries])
            rows = pred[(b, ai, slice(None), gy, gx)]  # (m, K)
            anchors = np.asarray(config.anchors[si], dtype=dtype)[ai]

            xy = nd.sigmoid(rows[:, 0:4])
            px = (xy[:, 0] * 2.0 - 0.5 + gx.astype(dtype)) * stride
            py = (xy[:, 1] * 2.0 - 0.5 + gy.astype(dtype)) * stride
            pw = (xy[:, 2] * 2.0) ** 2 * np.ascontiguousarray(anchors[:, 0])
            ph = (xy[:, 3] * 2.0) ** 2 * np.ascontiguousarray(anchors[:, 1])
            pred_box = (px - pw * 0.5, py - ph * 0.5, px + pw * 0.5, py + ph * 0.5)
            target_box = np.array([e.box for e in entries], dtype=dtype)
            term = nd.total(1.0 - ciou_tensor(pred_box, target_box))
            box_sum = term if box_sum is None else box_sum + term
            n_box += len(entries)

            cls_target = np.zeros((len(entries), config.num_classes), dtype=dtype)
            cls_target[np.arange(len(entries)), [e.class_id for e in entries]] = 1.0
            term = nd.total(_bce_terms(rows[:, 5:], cls_target))
            cls_sum = term if cls_sum is None else cls_sum + term
            n_cls += cls_target.size

            obj_target[b, ai, gy, gx] = 1.0

        term = nd.total(_bce_terms(pred[:, :, 4], obj_target))
        obj_sum = term if obj_sum is None else obj_sum + term
        n_obj += obj_target.size

    obj = obj_sum / float(n_obj)
    total = obj * weights.obj
    box_v = cls_v = 0.0
    if n_box:
        box = box_sum / float(n_box)
        cls = cls_sum / float(n_cls)
        total = total + box * weights.box + cls * weights.cls
        box_v, cls_v = box.item(), cls.item()
    return LossBreakdown(
        box_loss=box_v,
        obj_loss=obj.item(),
        cls_loss=cls_v,
        total=total.item(),
        weights=(weights.box, weights.obj, weights.cls),
        total_tensor=total,
    )
