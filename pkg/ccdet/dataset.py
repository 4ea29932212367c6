from __future__ import annotations
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.ndimage import gaussian_filter

from ccdet.errors import DatasetError
from ccdet.imaging import load_gray_png, load_mask_png, quantize, save_gray_png, save_mask_png

log = logging.getLogger(__name__)

HC, APD = 0, 1
CLASS_NAMES = ("HC", "APD")
APD_SUBTYPES = ("MSA", "PSP")

ANNOTATIONS_FILE = "annotations.jsonl"
IMAGES_DIR = "images"
MASKS_DIR = "masks"


# ============================================================
# Types
# ============================================================

@dataclass(frozen=True)
class BoxLabel:
    """Pixel box, end-exclusive: covers columns x1..x2-1 and rows y1..y2-1."""
    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def box(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class AnnotatedImage:
    image: np.ndarray  # H x W float32 in [0,1]
    subject_id: str
    slice_index: int
    boxes: List[BoxLabel]
    gt_region_mask: Optional[np.ndarray] = None  # mid-body region, synthetic corpora only
    subtype: Optional[str] = None

    @property
    def class_id(self) -> int:
        return self.boxes[0].class_id

    @property
    def size(self) -> int:
        return int(self.image.shape[0])

    @property
    def name(self) -> str:
        return f"{self.subject_id}_s{self.slice_index:02d}.png"


class SplitPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    round_id: int
    train_subjects: List[str]
    test_subjects: List[str]
    fraction: float
    seed: int = 0

    @model_validator(mode="after")
    def _disjoint(self) -> "SplitPlan":
        leaked = set(self.train_subjects) & set(self.test_subjects)
        if leaked:
            raise ValueError(f"subjects in both train and test: {sorted(leaked)}")
        return self


class CorpusSummary(BaseModel):
    n_images: int
    n_subjects: int
    subjects_per_class: Dict[str, int]
    slices_per_subject: Dict[int, int]  # slice count -> number of subjects with that count
    image_size: Optional[int] = None


# ============================================================
# Synthetic generator
# ============================================================

@dataclass(frozen=True)
class ArcGeometry:
    """C-shaped band opening downward; angles are degrees from straight up."""
    cx: float
    cy: float
    radius: float
    thickness: float
    span_deg: float
    thinning: float = 1.0
    attenuation: float = 1.0
    intensity: float = 0.85

    @property
    def midbody_thickness(self) -> float:
        return self.thickness * self.thinning


def sample_subject_geometry(rng: np.random.Generator, size: int, class_id: int) -> ArcGeometry:
    s = float(size)
    geom = ArcGeometry(
        cx=s * rng.uniform(0.42, 0.58),
        cy=s * rng.uniform(0.52, 0.60),
        radius=s * rng.uniform(0.22, 0.27),
        thickness=s * rng.uniform(0.07, 0.09),
        span_deg=rng.uniform(180.0, 270.0),
        intensity=rng.uniform(0.75, 0.9),
    )
    if class_id == APD:
        geom = replace(geom, thinning=rng.uniform(0.35, 0.6), attenuation=rng.uniform(0.6, 0.85))
    return geom


def jitter_slice(geom: ArcGeometry, rng: np.random.Generator, size: int) -> ArcGeometry:
    """Small perturbation standing in for an adjacent slice of the same subject."""
    s = float(size)
    return replace(
        geom,
        cx=geom.cx + s * rng.uniform(-0.02, 0.02),
        cy=geom.cy + s * rng.uniform(-0.02, 0.02),
        radius=geom.radius * rng.uniform(0.97, 1.03),
        thickness=geom.thickness * rng.uniform(0.95, 1.05),
        span_deg=float(np.clip(geom.span_deg + rng.uniform(-5.0, 5.0), 180.0, 270.0)),
    )


def arc_masks(geom: ArcGeometry, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """(shape mask, mid-body mask) on a size x size pixel grid, sampled at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - geom.cx, geom.cy - yy
    r = np.hypot(dx, dy)
    # angle from "up", wrapped to [-180, 180)
    d = (np.degrees(np.arctan2(dx, dy)) + 180.0) % 360.0 - 180.0
    on_arc = np.abs(d) <= geom.span_deg / 2.0
    midbody = np.abs(d) <= geom.span_deg / 6.0
    half_t = np.where(midbody, geom.midbody_thickness, geom.thickness) / 2.0
    shape = on_arc & (np.abs(r - geom.radius) <= half_t)
    return shape, shape & midbody


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8.0, mode="reflect")
    lo, hi = noise.min(), noise.max()
    noise = (noise - lo) / (hi - lo) if hi > lo else np.zeros_like(noise)
    return 0.05 + 0.30 * noise


def tight_box(mask: np.ndarray, class_id: int) -> BoxLabel:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DatasetError("cannot box an empty shape mask")
    return BoxLabel(class_id, float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def render_arc(geom: ArcGeometry, size: int, rng: np.random.Generator, class_id: int
               ) -> Tuple[np.ndarray, BoxLabel, np.ndarray]:
    """(image, tight box, mid-body mask). Image is quantized to 8 bits."""
    shape, midbody = arc_masks(geom, size)
    image = _background(rng, size)
    image[shape] = geom.intensity
    image[midbody] = geom.intensity * geom.attenuation
    image = gaussian_filter(image, sigma=0.7, mode="nearest")
    image = image + rng.normal(0.0, 0.02, size=image.shape)
    return quantize(np.clip(image, 0.0, 1.0)), tight_box(shape, class_id), midbody


def generate_synthetic(n_subjects_per_class: int = 20, slices_per_subject: int = 8,
                       size: int = 128, seed: int = 0) -> List[AnnotatedImage]:
    if size % 32 != 0:
        raise DatasetError(f"size must be divisible by 32, got {size}")
    if n_subjects_per_class < 1 or slices_per_subject < 1:
        raise DatasetError("need at least one subject per class and one slice per subject")

    subject_seeds = np.random.SeedSequence(seed).spawn(2 * n_subjects_per_class)
    corpus: List[AnnotatedImage] = []
    for class_id in (HC, APD):
        for k in range(n_subjects_per_class):
            rng = np.random.default_rng(subject_seeds[class_id * n_subjects_per_class + k])
            subject = f"{CLASS_NAMES[class_id]}{k + 1:03d}"
            subtype = APD_SUBTYPES[k % 2] if class_id == APD else None
            base = sample_subject_geometry(rng, size, class_id)
            for s in range(slices_per_subject):
                image, box, midbody = render_arc(jitter_slice(base, rng, size), size, rng, class_id)
                corpus.append(AnnotatedImage(image, subject, s, [box], midbody, subtype))
    log.info("generated %d images (%d subjects x %d slices, size %d, seed %d)",
             len(corpus), 2 * n_subjects_per_class, slices_per_subject, size, seed)
    return corpus


def sample_box_sizes(n: int, size: int = 128, seed: int = 0) -> np.ndarray:
    """(n, 2) box widths/heights drawn from the generator's geometry distribution."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, 2), dtype=np.float64)
    for i in range(n):
        class_id = int(rng.integers(0, 2))
        geom = jitter_slice(sample_subject_geometry(rng, size, class_id), rng, size)
        box = tight_box(arc_masks(geom, size)[0], class_id)
        out[i] = (box.x2 - box.x1, box.y2 - box.y1)
    return out


# ============================================================
# Splits
# ============================================================

def subjects_by_class(corpus: Iterable[AnnotatedImage]) -> Dict[int, List[str]]:
    out: Dict[int, set] = defaultdict(set)
    for item in corpus:
        out[item.class_id].add(item.subject_id)
    return {c: sorted(s) for c, s in sorted(out.items())}


def split(corpus: Sequence[AnnotatedImage], fraction: float = 0.8, rounds: int = 3,
          seed: int = 0) -> List[SplitPlan]:
    """Independent, class-stratified, subject-level shuffles; one SplitPlan per round."""
    if not 0.0 < fraction < 1.0:
        raise DatasetError(f"fraction must be in (0,1), got {fraction}")
    if rounds < 1:
        raise DatasetError(f"rounds must be >= 1, got {rounds}")
    by_class = subjects_by_class(corpus)
    for c, subjects in by_class.items():
        if len(subjects) < 2:
            raise DatasetError(f"class {CLASS_NAMES[c] if c < len(CLASS_NAMES) else c} has "
                               f"{len(subjects)} subject(s); need at least 2 to split")
    if len(by_class) < 2:
        raise DatasetError(f"need subjects from at least 2 classes, got classes {sorted(by_class)}")

    plans: List[SplitPlan] = []
    for r in range(rounds):
        rng = np.random.default_rng([seed, r])
        train, test = [], []
        for subjects in by_class.values():
            order = rng.permutation(len(subjects))
            n_train = min(max(int(round(fraction * len(subjects))), 1), len(subjects) - 1)
            train += [subjects[i] for i in order[:n_train]]
            test += [subjects[i] for i in order[n_train:]]
        plans.append(SplitPlan(round_id=r, train_subjects=sorted(train), test_subjects=sorted(test),
                               fraction=fraction, seed=seed))
    return plans


def select(corpus: Iterable[AnnotatedImage], subjects: Iterable[str]) -> List[AnnotatedImage]:
    wanted = set(subjects)
    return [item for item in corpus if item.subject_id in wanted]


# ============================================================
# On-disk corpus
# ============================================================

class AnnotationRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    image: str
    subject: str
    slice: int = Field(ge=0)
    class_id: int = Field(alias="class")
    box: Tuple[float, float, float, float]
    subtype: Optional[str] = None

    @field_validator("class_id")
    @classmethod
    def _known_class(cls, v: int) -> int:
        if v not in (HC, APD):
            raise ValueError(f"class must be 0 (HC) or 1 (APD), got {v}")
        return v

    @field_validator("box")
    @classmethod
    def _ordered(cls, v: Tuple[float, float, float, float]) -> Tuple[float, float, float, float]:
        x1, y1, x2, y2 = v
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"box must satisfy x1 < x2 and y1 < y2, got {list(v)}")
        return v


def save_corpus(corpus: Sequence[AnnotatedImage], root: Path) -> Path:
    root = Path(root)
    try:
        (root / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
        if any(item.gt_region_mask is not None for item in corpus):
            (root / MASKS_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create corpus directory {root}: {e}") from e

    lines = []
    for item in corpus:
        rel = f"{IMAGES_DIR}/{item.name}"
        save_gray_png(root / rel, item.image)
        if item.gt_region_mask is not None:
            save_mask_png(root / MASKS_DIR / item.name, item.gt_region_mask)
        box = item.boxes[0]
        record = {"image": rel, "subject": item.subject_id, "slice": item.slice_index,
                  "class": box.class_id, "box": [box.x1, box.y1, box.x2, box.y2]}
        if item.subtype is not None:
            record["subtype"] = item.subtype
        lines.append(json.dumps(record))
    (root / ANNOTATIONS_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("saved %d images to %s", len(corpus), root)
    return root


def load_corpus(root: Path) -> List[AnnotatedImage]:
    root = Path(root)
    ann = root / ANNOTATIONS_FILE
    if not ann.is_file():
        raise DatasetError(f"{ann}: annotations file not found")

    corpus: List[AnnotatedImage] = []
    subject_class: Dict[str, int] = {}
    for lineno, line in enumerate(ann.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{ann.name}:{lineno}"
        try:
            rec = AnnotationRecord.model_validate(json.loads(line))
        except json.JSONDecodeError as e:
            raise DatasetError(f"{where}: malformed JSON ({e.msg})") from e
        except ValidationError as e:
            raise DatasetError(f"{where}: invalid record: {e.errors()[0]['msg']} "
                               f"at {'.'.join(str(p) for p in e.errors()[0]['loc'])}") from e

        where = f"{where} ({rec.image})"
        path = root / rec.image
        if not path.is_file():
            raise DatasetError(f"{where}: image file not found")
        image = load_gray_png(path)
        h, w = image.shape
        x1, y1, x2, y2 = rec.box
        if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
            raise DatasetError(f"{where}: box {list(rec.box)} out of bounds for {w}x{h} image")
        if subject_class.setdefault(rec.subject, rec.class_id) != rec.class_id:
            raise DatasetError(f"{where}: subject {rec.subject} labelled with more than one class")

        mask_path = root / MASKS_DIR / Path(rec.image).name
        mask = load_mask_png(mask_path) if mask_path.is_file() else None
        corpus.append(AnnotatedImage(image, rec.subject, rec.slice,
                                     [BoxLabel(rec.class_id, *rec.box)], mask, rec.subtype))
    if not corpus:
        raise DatasetError(f"{ann}: no records")
    log.info("loaded %d images from %s", len(corpus), root)
    return corpus


def describe_corpus(corpus: Sequence[AnnotatedImage]) -> CorpusSummary:
    slices = Counter(item.subject_id for item in corpus)
    by_class = subjects_by_class(corpus)
    sizes = {item.size for item in corpus}
    return CorpusSummary(
        n_images=len(corpus),
        n_subjects=len(slices),
        subjects_per_class={CLASS_NAMES[c]: len(s) for c, s in by_class.items()},
        slices_per_subject=dict(sorted(Counter(slices.values()).items())),
        image_size=sizes.pop() if len(sizes) == 1 else None,
    )
