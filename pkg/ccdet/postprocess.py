from __future__ import annotations
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

ABSTAIN = -1
Box = Tuple[float, float, float, float]


class PostprocessConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    conf_threshold: float = 0.25
    iou_threshold: float = 0.45

    @field_validator("conf_threshold")
    @classmethod
    def _check_conf(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"conf_threshold must be in [0,1], got {v}")
        return v

    @field_validator("iou_threshold")
    @classmethod
    def _check_iou(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"iou_threshold must be in (0,1), got {v}")
        return v


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    # σ(obj)·σ(cls_c) for every class c; score == max(class_scores)
    class_scores: Tuple[float, ...] = ()


@dataclass(frozen=True)
class ImageVerdict:
    predicted_class: int
    confidence: float
    detection: Optional[Detection] = None

    @property
    def abstained(self) -> bool:
        return self.predicted_class == ABSTAIN

    def class_score(self, class_id: int) -> float:
        """Confidence the winning detection gives `class_id`; 0 on abstain."""
        if self.detection is None or class_id >= len(self.detection.class_scores):
            return 0.0
        return self.detection.class_scores[class_id]


def box_iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(dets: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """
    Greedy class-agnostic suppression: HC/APD label the same object.
    Highest score first, equal scores keep input order; kept boxes overlap <= iou_threshold.
    """
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    order = np.argsort(-scores, kind="stable")

    keep: List[int] = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        w = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        h = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = w * h
        ovr = inter / np.maximum(areas[i] + areas[rest] - inter, 1e-12)
        order = rest[ovr <= iou_threshold]
    return [dets[i] for i in keep]


def classify_image(dets: Sequence[Detection]) -> ImageVerdict:
    if not dets:
        return ImageVerdict(ABSTAIN, 0.0, None)
    best = dets[0]
    for d in dets[1:]:
        if d.score > best.score:
            best = d
    return ImageVerdict(best.class_id, best.score, best)


def subject_majority_vote(verdicts: Iterable[Tuple[str, ImageVerdict]]) -> Dict[str, int]:
    """
    Subject-level call from slice verdicts (not part of the image-level protocol).
    Abstains do not vote; ties go to the class with the larger summed confidence;
    a subject whose slices all abstain is ABSTAIN.
    """
    votes: Dict[str, Dict[int, List[float]]] = defaultdict(lambda: defaultdict(list))
    subjects: List[str] = []
    for subject, v in verdicts:
        if subject not in votes:
            subjects.append(subject)
        bucket = votes[subject]
        if not v.abstained:
            bucket[v.predicted_class].append(v.confidence)

    out: Dict[str, int] = {}
    for subject in subjects:
        bucket = votes[subject]
        if not bucket:
            out[subject] = ABSTAIN
            continue
        out[subject] = max(sorted(bucket), key=lambda c: (len(bucket[c]), sum(bucket[c])))
    return out
