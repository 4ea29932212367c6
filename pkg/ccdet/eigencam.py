from __future__ import annotations
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib import colormaps
from pydantic import BaseModel, ConfigDict, field_validator

from ccdet.dataset import CLASS_NAMES, AnnotatedImage
from ccdet.detector import DEFAULT_CAM_LAYERS, DetectorWeights, capture_shapes
from ccdet.errors import ConfigError, MetricError, ShapeError
from ccdet.imaging import draw_box, gray_to_rgb, resize_bilinear, save_gray_png, save_rgb_png
from ccdet.inference import ImageResult, infer
from ccdet.ndtensor import Tensor
from ccdet.postprocess import Box, PostprocessConfig

log = logging.getLogger(__name__)

CANONICAL_HW = (32, 64)  # rows x cols of the average-CAM grid
TOP_FRACTION = 0.05
OVERLAY_CMAP = "inferno"
OVERLAY_ALPHA = 0.5


class CamConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layers: Tuple[str, ...] = DEFAULT_CAM_LAYERS

    @field_validator("layers")
    @classmethod
    def _non_empty(cls, v: Tuple[str, ...]) -> Tuple[str, ...]:
        if not v:
            raise ValueError("at least one CAM layer is required")
        return v


@dataclass
class Heatmap:
    values: np.ndarray  # H x W, in [0,1]
    source_layers: Tuple[str, ...] = ()

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


class CamStats(BaseModel):
    argmax: Tuple[int, int]  # (row, col)
    argmax_in_region: bool
    top_mass_in_region: float


class CorpusCamStats(BaseModel):
    n_images: int
    n_used: int
    n_abstained: int
    n_excluded: int = 0
    brightest_in_region_rate: Optional[float] = None
    mean_top_mass_in_region: Optional[float] = None
    per_image: Dict[str, CamStats] = {}


@dataclass
class AverageCam:
    heatmap: Heatmap
    stats: CorpusCamStats
    results: List[ImageResult] = field(default_factory=list)


# ============================================================
# Eigen-CAM
# ============================================================

def _as_chw(activation: Union[Tensor, np.ndarray]) -> np.ndarray:
    arr = activation.data if isinstance(activation, Tensor) else np.asarray(activation)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] < 1:
        raise ShapeError(f"eigen_cam expects a C x H x W activation, got shape {arr.shape}")
    return arr.astype(np.float64)


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Clamp negatives and min-max scale to [0,1]; an all-zero map stays zero, a flat positive map becomes 1."""
    m = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    hi = m.max() if m.size else 0.0
    if not np.isfinite(hi) or hi <= 0.0:
        return np.zeros_like(m)
    lo = m.min()
    if hi - lo <= 1e-12 * hi:
        return np.ones_like(m)
    return (m - lo) / (hi - lo)


def principal_projection(activation: Union[Tensor, np.ndarray]) -> np.ndarray:
    """M·v1 reshaped to H x W, with M the (H·W) x C activation matrix and v1 its first right singular vector."""
    chw = _as_chw(activation)
    c, h, w = chw.shape
    m = chw.reshape(c, h * w).T
    if not np.any(m):
        return np.zeros((h, w))
    _, _, vt = np.linalg.svd(m, full_matrices=False)
    raw = m @ vt[0]
    if raw.sum() < 0:
        raw = -raw
    return raw.reshape(h, w)


def eigen_cam(activation: Union[Tensor, np.ndarray], layer: str = "") -> Heatmap:
    return Heatmap(normalize_map(principal_projection(activation)), (layer,) if layer else ())


def cam_from_activations(activations: Mapping[str, np.ndarray], layers: Sequence[str],
                         out_hw: Tuple[int, int]) -> Heatmap:
    """Per-layer Eigen-CAM, bilinearly upsampled to out_hw, averaged and renormalized."""
    missing = [name for name in layers if name not in activations]
    if missing:
        raise ConfigError(f"activations missing for layer(s) {missing}")
    maps = [resize_bilinear(eigen_cam(activations[name]).values, out_hw).astype(np.float64)
            for name in layers]
    return Heatmap(normalize_map(np.mean(maps, axis=0)), tuple(layers))


def _check_layers(weights: DetectorWeights, layers: Sequence[str]) -> None:
    known = capture_shapes(weights.config)
    unknown = [name for name in layers if name not in known]
    if unknown:
        raise ConfigError(f"unknown CAM layer(s) {unknown}; known: {sorted(known)}")


def explain(weights: DetectorWeights, image: np.ndarray,
            layers: Sequence[str] = DEFAULT_CAM_LAYERS,
            post: Optional[PostprocessConfig] = None) -> Tuple[Heatmap, ImageResult]:
    """Heatmap at image resolution together with the detections of the same forward pass."""
    _check_layers(weights, layers)
    result = infer(weights, [image], post, capture=layers)[0]
    heatmap = cam_from_activations(result.activations, layers, image.shape)
    result.activations = {}
    return heatmap, result


def multilayer_cam(weights: DetectorWeights, image: np.ndarray,
                   layers: Sequence[str] = DEFAULT_CAM_LAYERS) -> Heatmap:
    return explain(weights, image, layers)[0]


# ============================================================
# Statistics
# ============================================================

def cam_stats(heatmap: Heatmap, region_mask: np.ndarray, top_fraction: float = TOP_FRACTION) -> CamStats:
    values = heatmap.values
    if region_mask.shape != values.shape:
        raise ShapeError(f"region mask {region_mask.shape} does not match heatmap {values.shape}")
    flat = values.ravel()
    row, col = np.unravel_index(int(np.argmax(flat)), values.shape)
    k = max(1, int(math.ceil(top_fraction * flat.size)))
    top = np.argsort(-flat, kind="stable")[:k]
    mass = flat[top].sum()
    inside = flat[top][region_mask.ravel()[top]].sum()
    return CamStats(
        argmax=(int(row), int(col)),
        argmax_in_region=bool(region_mask[row, col]),
        top_mass_in_region=float(inside / mass) if mass > 0 else 0.0,
    )


def crop_to_box(heatmap: Heatmap, box: Box, out_hw: Tuple[int, int] = CANONICAL_HW) -> np.ndarray:
    h, w = heatmap.shape
    x1 = min(max(int(math.floor(box[0])), 0), w - 1)
    y1 = min(max(int(math.floor(box[1])), 0), h - 1)
    x2 = max(min(int(math.ceil(box[2])), w), x1 + 1)
    y2 = max(min(int(math.ceil(box[3])), h), y1 + 1)
    return resize_bilinear(heatmap.values[y1:y2, x1:x2], out_hw).astype(np.float64)


def average_cam(weights: DetectorWeights, images: Sequence[AnnotatedImage],
                layers: Sequence[str] = DEFAULT_CAM_LAYERS,
                post: Optional[PostprocessConfig] = None,
                include: Optional[Callable[[AnnotatedImage, ImageResult], bool]] = None,
                batch_size: int = 8) -> AverageCam:
    """
    Mean of per-image heatmaps cropped to each image's winning box and resampled
    to CANONICAL_HW. Abstained images are skipped and counted; `include` can
    exclude further images (e.g. misclassified ones).
    """
    if not images:
        raise MetricError("average_cam needs at least one image")
    _check_layers(weights, layers)
    results = infer(weights, [item.image for item in images], post, capture=layers, batch_size=batch_size)

    crops: List[np.ndarray] = []
    per_image: Dict[str, CamStats] = {}
    n_abstained = n_excluded = 0
    for item, result in zip(images, results):
        if result.verdict.abstained:
            n_abstained += 1
            continue
        if include is not None and not include(item, result):
            n_excluded += 1
            continue
        heatmap = cam_from_activations(result.activations, layers, item.image.shape)
        crops.append(crop_to_box(heatmap, result.verdict.detection.box))
        if item.gt_region_mask is not None:
            per_image[item.name] = cam_stats(heatmap, item.gt_region_mask)
        result.activations = {}
    if n_abstained:
        log.warning("average CAM skipped %d abstained image(s) of %d", n_abstained, len(images))
    if not crops:
        raise MetricError(f"average_cam: no usable images ({n_abstained} abstained, {n_excluded} excluded)")

    rate = mean_mass = None
    if per_image:
        rate = float(np.mean([s.argmax_in_region for s in per_image.values()]))
        mean_mass = float(np.mean([s.top_mass_in_region for s in per_image.values()]))
    stats = CorpusCamStats(n_images=len(images), n_used=len(crops), n_abstained=n_abstained,
                           n_excluded=n_excluded, brightest_in_region_rate=rate,
                           mean_top_mass_in_region=mean_mass, per_image=per_image)
    return AverageCam(Heatmap(normalize_map(np.mean(crops, axis=0)), tuple(layers)), stats, results)


# ============================================================
# Rendering
# ============================================================

def save_heatmap_png(heatmap: Heatmap, path: Path) -> Path:
    save_gray_png(Path(path), heatmap.values)
    return Path(path)


def overlay_rgb(image: np.ndarray, heatmap: Heatmap, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    colored = colormaps[OVERLAY_CMAP](heatmap.values)[..., :3] * 255.0
    base = gray_to_rgb(image).astype(np.float64)
    return np.clip((1.0 - alpha) * base + alpha * colored, 0, 255).astype(np.uint8)


def save_overlay_png(image: np.ndarray, heatmap: Heatmap, path: Path,
                     result: Optional[ImageResult] = None) -> Path:
    """Colour overlay over the full image; the winning box and its class score are drawn when present."""
    rgb = overlay_rgb(image, heatmap)
    if result is not None and not result.verdict.abstained:
        v = result.verdict
        rgb = draw_box(rgb, v.detection.box, f"{CLASS_NAMES[v.predicted_class]} {v.confidence:.2f}")
    save_rgb_png(Path(path), rgb)
    return Path(path)
