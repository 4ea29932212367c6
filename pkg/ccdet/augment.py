from __future__ import annotations
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from ccdet.dataset import AnnotatedImage, BoxLabel
from ccdet.imaging import resize_bilinear, resize_nearest

log = logging.getLogger(__name__)


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mosaic_prob: float = 1.0
    flip_prob: float = 0.5
    gamma_range: Tuple[float, float] = (0.7, 1.5)
    min_box_area_px: float = 16.0
    max_clip_fraction: float = 0.6
    # tile zoom on top of the exact quadrant fill; > 1 crops the tile
    mosaic_zoom: Tuple[float, float] = (1.0, 1.0)
    seed: int = 0

    @field_validator("mosaic_prob", "flip_prob", "max_clip_fraction")
    @classmethod
    def _probability(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"must be in [0,1], got {v}")
        return v

    @field_validator("min_box_area_px")
    @classmethod
    def _area(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"min_box_area_px must be >= 0, got {v}")
        return v

    @model_validator(mode="after")
    def _ranges(self) -> "AugmentConfig":
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise ValueError(f"gamma_range must satisfy 0 < lo <= hi, got {self.gamma_range}")
        zlo, zhi = self.mosaic_zoom
        if not 1.0 <= zlo <= zhi:
            raise ValueError(f"mosaic_zoom must satisfy 1 <= lo <= hi, got {self.mosaic_zoom}")
        return self


@dataclass
class AugmentStats:
    mosaics: int = 0
    dropped_clipped: int = 0
    dropped_small: int = 0


def clip_box(box: BoxLabel, bounds: Tuple[float, float, float, float], config: AugmentConfig,
             stats: Optional[AugmentStats] = None) -> Optional[BoxLabel]:
    """
    Clip `box` to `bounds` (x1, y1, x2, y2). Returns None when more than
    max_clip_fraction of its area was cut away, or when the rest is smaller
    than min_box_area_px.
    """
    bx1, by1, bx2, by2 = bounds
    x1, y1 = max(box.x1, bx1), max(box.y1, by1)
    x2, y2 = min(box.x2, bx2), min(box.y2, by2)
    kept = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    if box.area > 0 and 1.0 - kept / box.area > config.max_clip_fraction:
        if stats is not None:
            stats.dropped_clipped += 1
        log.warning("mosaic dropped a box that lost %.0f%% of its area to clipping",
                    100.0 * (1.0 - kept / box.area))
        return None
    if kept < config.min_box_area_px:
        if stats is not None:
            stats.dropped_small += 1
        return None
    return BoxLabel(box.class_id, x1, y1, x2, y2)


def mosaic(samples: Sequence[AnnotatedImage], out_size: int, rng: np.random.Generator,
           config: Optional[AugmentConfig] = None, pivot: Optional[Tuple[int, int]] = None,
           stats: Optional[AugmentStats] = None) -> AnnotatedImage:
    """
    Four samples tiled around a pivot drawn from the central half of the canvas,
    in order top-left, top-right, bottom-left, bottom-right. Each tile is scaled
    (independently in x and y) to fill its quadrant.
    """
    config = config or AugmentConfig()
    if len(samples) != 4:
        raise ValueError(f"mosaic needs exactly 4 samples, got {len(samples)}")
    if pivot is None:
        lo, hi = out_size // 4, (3 * out_size) // 4
        pivot = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
    px, py = pivot

    canvas = np.zeros((out_size, out_size), dtype=np.float32)
    with_masks = all(s.gt_region_mask is not None for s in samples)
    mask = np.zeros((out_size, out_size), dtype=bool) if with_masks else None
    quadrants = [(0, 0, px, py), (px, 0, out_size, py), (0, py, px, out_size), (px, py, out_size, out_size)]
    boxes: List[BoxLabel] = []

    for sample, (qx1, qy1, qx2, qy2) in zip(samples, quadrants):
        qw, qh = qx2 - qx1, qy2 - qy1
        h, w = sample.image.shape
        zoom = float(rng.uniform(*config.mosaic_zoom))
        tw, th = max(qw, int(round(qw * zoom))), max(qh, int(round(qh * zoom)))
        ox = int(rng.integers(0, tw - qw + 1))
        oy = int(rng.integers(0, th - qh + 1))
        tile = resize_bilinear(sample.image, (th, tw))
        canvas[qy1:qy2, qx1:qx2] = tile[oy:oy + qh, ox:ox + qw]
        if mask is not None:
            mask[qy1:qy2, qx1:qx2] = resize_nearest(sample.gt_region_mask, (th, tw))[oy:oy + qh, ox:ox + qw]

        sx, sy = tw / w, th / h
        for b in sample.boxes:
            moved = BoxLabel(b.class_id, b.x1 * sx - ox + qx1, b.y1 * sy - oy + qy1,
                             b.x2 * sx - ox + qx1, b.y2 * sy - oy + qy1)
            kept = clip_box(moved, (qx1, qy1, qx2, qy2), config, stats)
            if kept is not None:
                boxes.append(kept)

    if stats is not None:
        stats.mosaics += 1
    subject = "+".join(s.subject_id for s in samples)
    return AnnotatedImage(np.clip(canvas, 0.0, 1.0), f"mosaic:{subject}", -1, boxes, mask)


def hflip(sample: AnnotatedImage, rng: np.random.Generator,
          config: Optional[AugmentConfig] = None) -> AnnotatedImage:
    config = config or AugmentConfig()
    if rng.random() >= config.flip_prob:
        return sample
    w = sample.image.shape[1]
    boxes = [BoxLabel(b.class_id, w - b.x2, b.y1, w - b.x1, b.y2) for b in sample.boxes]
    mask = None if sample.gt_region_mask is None else sample.gt_region_mask[:, ::-1].copy()
    return AnnotatedImage(sample.image[:, ::-1].copy(), sample.subject_id, sample.slice_index,
                          boxes, mask, sample.subtype)


def gamma(sample: AnnotatedImage, rng: np.random.Generator,
          config: Optional[AugmentConfig] = None) -> AnnotatedImage:
    config = config or AugmentConfig()
    g = float(rng.uniform(*config.gamma_range))
    image = np.power(np.clip(sample.image, 0.0, 1.0), g).astype(np.float32)
    return AnnotatedImage(image, sample.subject_id, sample.slice_index, list(sample.boxes),
                          sample.gt_region_mask, sample.subtype)


def augment_sample(pool: Sequence[AnnotatedImage], index: int, rng: np.random.Generator,
                   config: Optional[AugmentConfig] = None, use_mosaic: bool = True,
                   stats: Optional[AugmentStats] = None) -> AnnotatedImage:
    """Training view of pool[index]: optional mosaic with 3 random partners from the pool, then flip and gamma."""
    config = config or AugmentConfig()
    sample = pool[index]
    if use_mosaic and rng.random() < config.mosaic_prob:
        partners = rng.integers(0, len(pool), size=3)
        tiles = [sample] + [pool[int(i)] for i in partners]
        order = rng.permutation(4)
        sample = mosaic([tiles[i] for i in order], sample.size, rng, config, stats=stats)
    return gamma(hflip(sample, rng, config), rng, config)
