from __future__ import annotations
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.cluster.vq import kmeans2

from ccdet import ndtensor as nd
from ccdet.errors import ConfigError, ShapeError
from ccdet.ndtensor import Tensor
from ccdet.postprocess import Detection

log = logging.getLogger(__name__)

NUM_ANCHORS = 3
STRIDES = (8, 16, 32)
SPP_KERNELS = (5, 9, 13)
WIDTH_MULTIPLIERS = (1, 2, 4, 8, 8)
DEFAULT_CAM_LAYERS = ("neck.out3", "neck.out4", "neck.out5")

# (w, h) in pixels for a 128-pixel canvas, 3 per stride, sorted by area.
# Frozen output of kmeans_anchors(sample_box_sizes(10000, 128, 0), seed=0).
DEFAULT_ANCHORS: Tuple[Tuple[Tuple[float, float], ...], ...] = (
    ((67.6, 38.8), (71.4, 37.9), (75.0, 41.3)),
    ((71.4, 46.8), (78.4, 43.5), (68.0, 51.6)),
    ((77.0, 52.2), (72.5, 56.0), (77.6, 61.1)),
)


class DetectorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_size: int = 128
    in_channels: int = 1
    width_base: int = 8
    num_classes: int = 2
    anchors: Tuple[Tuple[Tuple[float, float], ...], ...] = DEFAULT_ANCHORS
    strides: Tuple[int, int, int] = STRIDES
    leaky_slope: float = 0.1

    @field_validator("input_size")
    @classmethod
    def _check_input_size(cls, v: int) -> int:
        if v <= 0 or v % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {v}")
        return v

    @field_validator("in_channels")
    @classmethod
    def _check_in_channels(cls, v: int) -> int:
        if v not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {v}")
        return v

    @field_validator("width_base")
    @classmethod
    def _check_width(cls, v: int) -> int:
        if v < 2 or v % 2:
            raise ValueError(f"width_base must be an even integer >= 2, got {v}")
        return v

    @field_validator("num_classes")
    @classmethod
    def _check_classes(cls, v: int) -> int:
        if v < 2:
            raise ValueError(f"num_classes must be >= 2, got {v}")
        return v

    @field_validator("strides")
    @classmethod
    def _check_strides(cls, v: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if tuple(v) != STRIDES:
            raise ValueError(f"strides must be {STRIDES}, got {v}")
        return v

    @field_validator("leaky_slope")
    @classmethod
    def _check_slope(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"leaky_slope must be in (0,1), got {v}")
        return v

    @model_validator(mode="after")
    def _check_anchors(self) -> "DetectorConfig":
        if len(self.anchors) != len(STRIDES) or any(len(s) != NUM_ANCHORS for s in self.anchors):
            raise ValueError(f"anchors must be {len(STRIDES)} scales x {NUM_ANCHORS} (w,h) pairs")
        if any(w <= 0 or h <= 0 for scale in self.anchors for w, h in scale):
            raise ValueError("anchors must all be positive")
        return self

    @property
    def outputs_per_anchor(self) -> int:
        return 5 + self.num_classes

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(self.width_base * m for m in WIDTH_MULTIPLIERS)

    def grid_size(self, scale: int) -> int:
        return self.input_size // self.strides[scale]


@dataclass
class DetectorWeights:
    """Named map layer path -> Tensor, tied to the config that declared the layers."""
    config: DetectorConfig
    params: Dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def astype(self, dtype) -> "DetectorWeights":
        return DetectorWeights(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def freeze(self) -> "DetectorWeights":
        """Read-only copy safe to share across inference threads."""
        frozen = {}
        for k, v in self.params.items():
            t = Tensor(v.data, requires_grad=False, dtype=v.dtype)
            t.data.flags.writeable = False
            frozen[k] = t
        return DetectorWeights(self.config, frozen)


@dataclass
class RawPrediction:
    """Per scale: N x A x (5+num_classes) x H_s x W_s logits."""
    scales: List[Tensor]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    c_in: int
    c_out: int
    kernel: int
    stride: int
    activation: bool
    out_hw: int

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.c_out, self.c_in, self.kernel, self.kernel)


# ============================================================
# Architecture, written once against an abstract "ops" backend
# ============================================================

class _ShapeOps:
    """Walks the architecture on (channels, size) pairs and records every conv."""

    def __init__(self):
        self.layers: List[LayerSpec] = []
        self.captures: Dict[str, Tuple[int, int, int]] = {}

    def conv(self, name, x, c_out, k, stride=1, act=True):
        c, s = x
        out = (s + 2 * (k // 2) - k) // stride + 1
        self.layers.append(LayerSpec(name, c, c_out, k, stride, act, out))
        return (c_out, out)

    def channels(self, x):
        return x[0]

    def split(self, x):
        c, s = x
        return (c // 2, s), (c - c // 2, s)

    def add(self, a, b):
        return a

    def concat(self, xs):
        return (sum(c for c, _ in xs), xs[0][1])

    def maxpool(self, x, k):
        return x

    def upsample(self, x):
        return (x[0], x[1] * 2)

    def capture(self, name, x):
        self.captures[name] = (x[0], x[1], x[1])
        return x


class _TensorOps:
    def __init__(self, weights: DetectorWeights, capture: Sequence[str]):
        self.params = weights.params
        self.slope = weights.config.leaky_slope
        self.wanted = set(capture)
        self.captured: Dict[str, Tensor] = {}

    def conv(self, name, x, c_out, k, stride=1, act=True):
        try:
            w, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
        except KeyError as e:
            raise ShapeError(f"missing layer weights for {name}") from e
        if w.shape[0] != c_out or w.shape[2] != k:
            raise ShapeError(f"{name}: weight shape {w.shape} does not match architecture ({c_out}, *, {k}, {k})")
        y = nd.conv2d(x, w, b, stride=stride, pad=k // 2)
        return nd.leaky_relu(y, self.slope) if act else y

    def channels(self, x):
        return x.shape[1]

    def split(self, x):
        h = x.shape[1] // 2
        return x[:, :h], x[:, h:]

    def add(self, a, b):
        return a + b

    def concat(self, xs):
        return nd.concat_channels(xs)

    def maxpool(self, x, k):
        return nd.maxpool2d(x, k, stride=1, pad=k // 2)

    def upsample(self, x):
        return nd.upsample_nearest_2x(x)

    def capture(self, name, x):
        if name in self.wanted:
            self.captured[name] = x
        return x


def _csp(ops, name, x):
    # channel split: one half through a residual bottleneck, the other as identity path
    a, b = ops.split(x)
    h = ops.channels(a)
    y = ops.conv(f"{name}.m1", a, h, 1)
    y = ops.conv(f"{name}.m2", y, h, 3)
    merged = ops.concat([ops.add(a, y), b])
    return ops.conv(f"{name}.fuse", merged, ops.channels(merged), 1)


def _network(ops, x, config: DetectorConfig):
    c1, c2, c3, c4, c5 = config.widths
    feats = []
    for i, c in enumerate(config.widths, start=1):
        x = ops.conv(f"backbone.stage{i}.down", x, c, 3, 2)
        x = _csp(ops, f"backbone.stage{i}.csp", x)
        feats.append(ops.capture(f"backbone.stage{i}", x))
    p3, p4 = feats[2], feats[3]

    # SPP
    y = ops.conv("neck.spp.cv1", x, c5 // 2, 1)
    y = ops.concat([y] + [ops.maxpool(y, k) for k in SPP_KERNELS])
    p5 = ops.capture("neck.spp", ops.conv("neck.spp.cv2", y, c5, 1))

    # top-down
    h5 = ops.conv("neck.lat5", p5, c3, 1)
    t4 = ops.conv("neck.td4.reduce", ops.concat([ops.upsample(h5), p4]), c4, 1)
    t4 = _csp(ops, "neck.td4.csp", t4)
    h4 = ops.conv("neck.lat4", t4, c3, 1)
    o3 = ops.conv("neck.td3.reduce", ops.concat([ops.upsample(h4), p3]), c3, 1)
    o3 = ops.capture("neck.out3", _csp(ops, "neck.td3.csp", o3))

    # bottom-up
    d4 = ops.conv("neck.down3", o3, c3, 3, 2)
    o4 = ops.conv("neck.bu4.reduce", ops.concat([d4, h4]), c4, 1)
    o4 = ops.capture("neck.out4", _csp(ops, "neck.bu4.csp", o4))
    d5 = ops.conv("neck.down4", o4, c4, 3, 2)
    o5 = ops.conv("neck.bu5.reduce", ops.concat([d5, h5]), c5, 1)
    o5 = ops.capture("neck.out5", _csp(ops, "neck.bu5.csp", o5))

    n_out = NUM_ANCHORS * config.outputs_per_anchor
    return [ops.conv(f"head.p{i}", o, n_out, 1, act=False) for i, o in zip((3, 4, 5), (o3, o4, o5))]


@lru_cache(maxsize=32)
def _shape_walk(config: DetectorConfig) -> _ShapeOps:
    ops = _ShapeOps()
    _network(ops, (config.in_channels, config.input_size), config)
    return ops


def layer_table(config: DetectorConfig) -> List[LayerSpec]:
    """Every conv layer the architecture declares, in execution order."""
    return list(_shape_walk(config).layers)


def capture_shapes(config: DetectorConfig) -> Dict[str, Tuple[int, int, int]]:
    """Capture point -> (C, H, W) of its activation."""
    return dict(_shape_walk(config).captures)


def weight_shapes(config: DetectorConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    for layer in layer_table(config):
        shapes[f"{layer.name}.weight"] = layer.weight_shape
        shapes[f"{layer.name}.bias"] = (layer.c_out,)
    return shapes


# ============================================================
# Public API
# ============================================================

def build(config: DetectorConfig, seed: int = 0) -> DetectorWeights:
    """He-uniform conv weights, zero biases; deterministic in (config, seed)."""
    if not isinstance(config, DetectorConfig):
        raise ConfigError(f"build expects a DetectorConfig, got {type(config).__name__}")
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for layer in layer_table(config):
        fan_in = layer.c_in * layer.kernel * layer.kernel
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=layer.weight_shape).astype(np.float32)
        params[f"{layer.name}.weight"] = nd.parameter(w)
        params[f"{layer.name}.bias"] = nd.parameter(np.zeros(layer.c_out, dtype=np.float32))
    log.debug("built detector: %d layers, %d parameters", len(params) // 2,
              sum(p.size for p in params.values()))
    return DetectorWeights(config, params)


def check_weights(weights: DetectorWeights) -> None:
    """Every declared layer present with the exact expected shape."""
    expected = weight_shapes(weights.config)
    missing = sorted(set(expected) - set(weights.params))
    extra = sorted(set(weights.params) - set(expected))
    if missing or extra:
        raise ShapeError(f"weight set mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for name, shape in expected.items():
        if weights.params[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {weights.params[name].shape}")


def forward(weights: DetectorWeights, images: Tensor,
            capture: Sequence[str] = ()) -> Tuple[RawPrediction, Dict[str, Tensor]]:
    """Images N x C x S x S in [0,1] -> raw logits at 3 scales plus requested activations."""
    config = weights.config
    if not isinstance(images, Tensor):
        images = Tensor(images)
    s = config.input_size
    if images.ndim != 4 or images.shape[1:] != (config.in_channels, s, s):
        raise ShapeError(f"forward expects N x {config.in_channels} x {s} x {s}, got {images.shape}")
    known = capture_shapes(config)
    unknown = [c for c in capture if c not in known]
    if unknown:
        raise ConfigError(f"unknown capture layer(s) {unknown}; known: {sorted(known)}")

    ops = _TensorOps(weights, capture)
    heads = _network(ops, images, config)
    n = images.shape[0]
    k = config.outputs_per_anchor
    scales = [h.reshape(n, NUM_ANCHORS, k, h.shape[2], h.shape[3]) for h in heads]
    return RawPrediction(scales), ops.captured


def _sigmoid64(x: np.ndarray) -> np.ndarray:
    return nd._stable_sigmoid(np.asarray(x, dtype=np.float64))


def decode(raw: RawPrediction, config: DetectorConfig, conf_threshold: float,
           image_index: int = 0) -> list:
    """
    Raw logits of one image -> Detections with score >= conf_threshold.

    bx = (2σ(tx) - 0.5 + cx)·s, bw = aw·(2σ(tw))², score = σ(obj)·max_c σ(cls_c);
    boxes clipped to the image, empty boxes dropped. Order: scale, anchor, row, col.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ConfigError(f"conf_threshold must be in [0,1], got {conf_threshold}")
    size = float(config.input_size)
    out = []
    for si, pred in enumerate(raw.scales):
        arr = _sigmoid64(pred.data[image_index])  # A, K, H, W
        stride = config.strides[si]
        _, _, gh, gw = arr.shape
        cy, cx = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
        for a, (aw, ah) in enumerate(config.anchors[si]):
            p = arr[a]
            cls = p[5:]
            score = p[4] * cls.max(axis=0)
            keep = score >= conf_threshold
            if not keep.any():
                continue
            bx = (2.0 * p[0] - 0.5 + cx) * stride
            by = (2.0 * p[1] - 0.5 + cy) * stride
            bw = aw * (2.0 * p[2]) ** 2
            bh = ah * (2.0 * p[3]) ** 2
            x1 = np.clip(bx - bw / 2, 0.0, size)
            x2 = np.clip(bx + bw / 2, 0.0, size)
            y1 = np.clip(by - bh / 2, 0.0, size)
            y2 = np.clip(by + bh / 2, 0.0, size)
            keep &= (x2 > x1) & (y2 > y1)
            for r, c in zip(*np.nonzero(keep)):
                class_scores = tuple(float(p[4, r, c] * v) for v in cls[:, r, c])
                out.append(Detection(
                    box=(float(x1[r, c]), float(y1[r, c]), float(x2[r, c]), float(y2[r, c])),
                    class_id=int(cls[:, r, c].argmax()),
                    score=float(score[r, c]),
                    class_scores=class_scores,
                ))
    return out


def decode_batch(raw: RawPrediction, config: DetectorConfig, conf_threshold: float) -> list:
    n = raw.scales[0].shape[0]
    return [decode(raw, config, conf_threshold, image_index=i) for i in range(n)]


def kmeans_anchors(wh: np.ndarray, seed: int = 0, k: int = NUM_ANCHORS * len(STRIDES)
                   ) -> Tuple[Tuple[Tuple[float, float], ...], ...]:
    """k-means over box (w,h); clusters sorted by area, 3 per stride (small -> stride 8)."""
    wh = np.asarray(wh, dtype=np.float64)
    if wh.ndim != 2 or wh.shape[1] != 2 or len(wh) < k:
        raise ConfigError(f"kmeans_anchors needs at least {k} (w,h) rows, got shape {wh.shape}")
    scale = wh.std(axis=0)
    scale[scale == 0] = 1.0
    centroids, _ = kmeans2(wh / scale, k, iter=30, minit="++", seed=seed)
    centroids = centroids * scale
    centroids = centroids[np.argsort(centroids.prod(axis=1), kind="stable")]
    rounded = [(round(float(w), 1), round(float(h), 1)) for w, h in centroids]
    return tuple(tuple(rounded[i:i + NUM_ANCHORS]) for i in range(0, k, NUM_ANCHORS))


def anchor_fit(wh: np.ndarray, anchors=DEFAULT_ANCHORS) -> np.ndarray:
    """Per box, the smallest max(w/aw, aw/w, h/ah, ah/h) over all anchors (1 = exact match)."""
    wh = np.asarray(wh, dtype=np.float64)[:, None, :]
    a = np.asarray([pair for scale in anchors for pair in scale], dtype=np.float64)[None, :, :]
    r = np.maximum(wh / a, a / wh).max(axis=2)
    return r.min(axis=1)
