"""Batched, gradient-free forward passes shared by evaluation, CAM and prediction."""
from __future__ import annotations
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ccdet import ndtensor as nd
from ccdet.detector import DetectorConfig, DetectorWeights, decode_batch, forward
from ccdet.errors import ShapeError
from ccdet.postprocess import Detection, ImageVerdict, PostprocessConfig, classify_image, nms

log = logging.getLogger(__name__)


@dataclass
class ImageResult:
    detections: List[Detection]  # after NMS, best first
    verdict: ImageVerdict
    activations: Dict[str, np.ndarray] = field(default_factory=dict)  # layer -> C x H x W


def to_batch(images: Sequence[np.ndarray], config: DetectorConfig) -> nd.Tensor:
    """Stack H x W grayscale images into N x C x S x S, repeating the plane for C > 1."""
    s = config.input_size
    for i, image in enumerate(images):
        if image.shape != (s, s):
            raise ShapeError(f"image {i}: expected {s}x{s}, got {'x'.join(map(str, image.shape))}")
    stack = np.stack([np.asarray(im, dtype=np.float32) for im in images])[:, None]
    if config.in_channels > 1:
        stack = np.repeat(stack, config.in_channels, axis=1)
    return nd.Tensor(stack)


def infer(weights: DetectorWeights, images: Sequence[np.ndarray],
          post: Optional[PostprocessConfig] = None, capture: Sequence[str] = (),
          batch_size: int = 8) -> List[ImageResult]:
    post = post or PostprocessConfig()
    config = weights.config
    results: List[ImageResult] = []
    with nd.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            raw, captured = forward(weights, to_batch(chunk, config), capture=capture)
            for i, dets in enumerate(decode_batch(raw, config, post.conf_threshold)):
                kept = nms(dets, post.iou_threshold)
                acts = {name: t.data[i].copy() for name, t in captured.items()}
                results.append(ImageResult(kept, classify_image(kept), acts))
    n_abstain = sum(r.verdict.abstained for r in results)
    if n_abstain:
        log.debug("%d of %d images produced no detection above %.2f", n_abstain, len(results),
                  post.conf_threshold)
    return results
