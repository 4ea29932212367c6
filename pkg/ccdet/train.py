from __future__ import annotations
import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Literal, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from tqdm import tqdm

from ccdet import ndtensor as nd
from ccdet.augment import AugmentConfig, AugmentStats, augment_sample
from ccdet.dataset import AnnotatedImage, SplitPlan, select, split
from ccdet.detector import DetectorConfig, DetectorWeights, build, forward
from ccdet.errors import ConfigError, DatasetError, DivergenceError, MetricError
from ccdet.evalmetrics import EvalReport, confusion_and_scores, detection_iou_stats, pr_curve, roc_auc
from ccdet.inference import ImageResult, infer, to_batch
from ccdet.losses import GroundTruth, LossWeights, assign_targets, total_loss
from ccdet.ndtensor import Tensor
from ccdet.postprocess import ABSTAIN, PostprocessConfig, subject_majority_vote

log = logging.getLogger(__name__)

TRAILING_WINDOW = 10

Checkpoint = Callable[[DetectorWeights, int], None]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = 60
    batch_size: int = 2
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-5
    seed: int = 0
    augment: AugmentConfig = AugmentConfig()
    loss_weights: LossWeights = LossWeights()
    close_mosaic_epochs: int = 10
    lr_schedule: Literal["constant", "cosine"] = "constant"
    lr_final_fraction: float = 0.01
    grad_clip_norm: Optional[float] = None

    @field_validator("epochs", "batch_size")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v

    @field_validator("lr", "weight_decay", "close_mosaic_epochs")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError(f"must be >= 0, got {v}")
        return v

    @field_validator("momentum", "lr_final_fraction")
    @classmethod
    def _unit(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"must be in [0,1], got {v}")
        return v

    @field_validator("grad_clip_norm")
    @classmethod
    def _clip(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and v <= 0:
            raise ValueError(f"grad_clip_norm must be > 0 when set, got {v}")
        return v

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based `epoch`."""
        if self.lr_schedule == "constant" or self.epochs == 1:
            return self.lr
        t = (epoch - 1) / (self.epochs - 1)
        final = self.lr * self.lr_final_fraction
        return final + 0.5 * (self.lr - final) * (1.0 + math.cos(math.pi * t))


class HoldoutConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rounds: int = 3
    fraction: float = 0.8
    seed: int = 0

    @field_validator("rounds")
    @classmethod
    def _rounds(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"rounds must be >= 1, got {v}")
        return v

    @field_validator("fraction")
    @classmethod
    def _fraction(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"fraction must be in (0,1), got {v}")
        return v


# ============================================================
# Optimizer
# ============================================================

def sgd_step(params: Dict[str, Tensor], velocity: Dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float) -> None:
    """
    In place, per parameter with a populated grad:
        v <- momentum·v + g + weight_decay·w   (no decay on biases)
        w <- w - lr·v
    """
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if weight_decay and not name.endswith(".bias"):
            g = g + weight_decay * p.data
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v.astype(p.dtype, copy=False)
        p.data -= (lr * velocity[name]).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, params: Dict[str, Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0, grad_clip_norm: Optional[float] = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.velocity: Dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        nd.zero_grads(self.params.values())

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                             for p in self.params.values() if p.grad is not None))

    def step(self, lr: Optional[float] = None) -> float:
        norm = self.grad_norm()
        if self.grad_clip_norm is not None and norm > self.grad_clip_norm:
            scale = self.grad_clip_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = (p.grad * scale).astype(p.dtype)
        sgd_step(self.params, self.velocity, self.lr if lr is None else lr,
                 self.momentum, self.weight_decay)
        return norm


# ============================================================
# Batching
# ============================================================

def iter_batches(train: Sequence[AnnotatedImage], batch_size: int, rng: np.random.Generator,
                 test_subjects: Set[str] = frozenset()) -> Iterator[List[int]]:
    for item in train:
        if item.subject_id in test_subjects:
            raise DatasetError(f"test subject {item.subject_id} reached the training batch iterator")
    order = rng.permutation(len(train))
    for start in range(0, len(order), batch_size):
        yield [int(i) for i in order[start:start + batch_size]]


def collate(samples: Sequence[AnnotatedImage], config: DetectorConfig) -> Tuple[Tensor, List[GroundTruth]]:
    images = to_batch([s.image for s in samples], config)
    gt = [GroundTruth(b, box.class_id, box.x1, box.y1, box.x2, box.y2)
          for b, s in enumerate(samples) for box in s.boxes]
    return images, gt


# ============================================================
# Training
# ============================================================

@dataclass
class EpochLog:
    epoch: int
    box_loss: float
    obj_loss: float
    cls_loss: float
    total: float
    seconds: float
    lr: float = 0.0
    steps: int = 0


@dataclass
class TrainLog:
    epochs: List[EpochLog] = field(default_factory=list)
    report: Optional[EvalReport] = None
    augment: AugmentStats = field(default_factory=AugmentStats)

    @property
    def steps(self) -> int:
        return sum(e.steps for e in self.epochs)

    def to_csv(self, path: Path) -> Path:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "box_loss", "obj_loss", "cls_loss", "total", "seconds"])
            for e in self.epochs:
                writer.writerow([e.epoch, f"{e.box_loss:.6f}", f"{e.obj_loss:.6f}",
                                 f"{e.cls_loss:.6f}", f"{e.total:.6f}", f"{e.seconds:.2f}"])
        return Path(path)


def _check_sizes(images: Sequence[AnnotatedImage], config: DetectorConfig) -> None:
    sizes = {item.image.shape for item in images}
    if sizes != {(config.input_size, config.input_size)}:
        raise ConfigError(f"corpus image sizes {sorted(sizes)} do not match input_size {config.input_size}")


def train_round(corpus: Sequence[AnnotatedImage], plan: SplitPlan, dconfig: DetectorConfig,
                tconfig: TrainConfig, checkpoint: Optional[Checkpoint] = None,
                progress: bool = False) -> Tuple[DetectorWeights, TrainLog]:
    train = select(corpus, plan.train_subjects)
    if not train:
        raise DatasetError(f"round {plan.round_id}: training split is empty")
    _check_sizes(train, dconfig)
    test_subjects = set(plan.test_subjects)

    weights = build(dconfig, seed=tconfig.seed)
    optimizer = SGD(weights.params, tconfig.lr, tconfig.momentum, tconfig.weight_decay,
                    tconfig.grad_clip_norm)
    rng = np.random.default_rng([tconfig.seed, tconfig.augment.seed, plan.round_id])
    tlog = TrainLog()
    mosaic_until = tconfig.epochs - tconfig.close_mosaic_epochs

    for epoch in range(1, tconfig.epochs + 1):
        started = time.perf_counter()
        lr = tconfig.lr_at(epoch)
        sums = np.zeros(4)
        steps = 0
        batches = list(iter_batches(train, tconfig.batch_size, rng, test_subjects))
        bar = tqdm(batches, desc=f"round {plan.round_id} epoch {epoch}/{tconfig.epochs}",
                   disable=not progress, leave=False)
        for step, batch in enumerate(bar, start=1):
            samples = [augment_sample(train, i, rng, tconfig.augment, epoch <= mosaic_until, tlog.augment)
                       for i in batch]
            images, gt = collate(samples, dconfig)
            raw, _ = forward(weights, images)
            loss = total_loss(raw, assign_targets(gt, dconfig), dconfig, tconfig.loss_weights)
            if not math.isfinite(loss.total):
                raise DivergenceError(epoch, step)
            optimizer.zero_grad()
            nd.backward(loss.total_tensor)
            optimizer.step(lr)
            sums += (loss.box_loss, loss.obj_loss, loss.cls_loss, loss.total)
            steps += 1
            bar.set_postfix(loss=f"{loss.total:.4f}")

        box_l, obj_l, cls_l, tot = sums / steps
        entry = EpochLog(epoch, box_l, obj_l, cls_l, tot, time.perf_counter() - started, lr, steps)
        tlog.epochs.append(entry)
        log.info("round %d epoch %d/%d: box=%.4f obj=%.4f cls=%.4f total=%.4f (%.1fs)",
                 plan.round_id, epoch, tconfig.epochs, box_l, obj_l, cls_l, tot, entry.seconds)
        if epoch >= TRAILING_WINDOW and tlog.epochs[-1].total > tlog.epochs[-TRAILING_WINDOW].total:
            log.warning("round %d: total loss rose over the last %d epochs (%.4f -> %.4f)",
                        plan.round_id, TRAILING_WINDOW, tlog.epochs[-TRAILING_WINDOW].total, tot)

    if tlog.augment.dropped_clipped:
        log.warning("round %d: mosaic dropped %d over-clipped box(es)", plan.round_id,
                    tlog.augment.dropped_clipped)
    if checkpoint is not None:
        checkpoint(weights, tconfig.epochs)
    return weights, tlog


# ============================================================
# Evaluation + hold-out
# ============================================================

def evaluate(weights: DetectorWeights, images: Sequence[AnnotatedImage],
             post: Optional[PostprocessConfig] = None, batch_size: int = 8
             ) -> Tuple[EvalReport, List[ImageResult]]:
    """Image-level report; ROC/PR are left out with a note when only one class is present."""
    if not images:
        raise MetricError("evaluation set is empty")
    _check_sizes(images, weights.config)
    results = infer(weights, [item.image for item in images], post, batch_size=batch_size)
    report = confusion_and_scores([(r.verdict, item.class_id) for item, r in zip(images, results)])

    scores = [(r.verdict.class_score(1), item.class_id) for item, r in zip(images, results)]
    try:
        report.roc, report.auc = roc_auc(scores)
        report.pr = pr_curve(scores)
    except MetricError as e:
        log.warning("ROC/PR refused: %s", e)
        report.notes.append(f"ROC/PR refused: {e}")
    report.iou = detection_iou_stats([
        (None if r.verdict.abstained else r.verdict.detection.box, item.boxes[0].box)
        for item, r in zip(images, results)
    ])
    return report, results


@dataclass
class RoundResult:
    plan: SplitPlan
    weights: DetectorWeights
    log: TrainLog
    report: EvalReport
    subject_votes: Dict[str, int]


class HoldoutSummary(BaseModel):
    rounds: int
    accuracy: List[float]
    auc: List[Optional[float]]
    mean_accuracy: float
    mean_auc: Optional[float] = None
    mean_iou_at_least_05: Optional[float] = None
    # majority vote over each test subject's slices; not part of the image-level protocol
    subject_level_supplementary: Dict[str, float] = {}


def _run_round(corpus: Sequence[AnnotatedImage], plan: SplitPlan, dconfig: DetectorConfig,
               tconfig: TrainConfig, post: PostprocessConfig, checkpoint: Optional[Checkpoint],
               progress: bool) -> RoundResult:
    weights, tlog = train_round(corpus, plan, dconfig, tconfig, checkpoint, progress)
    test = select(corpus, plan.test_subjects)
    report, results = evaluate(weights, test, post)
    tlog.report = report
    votes = subject_majority_vote((item.subject_id, r.verdict) for item, r in zip(test, results))
    log.info("round %d: accuracy=%.3f auc=%s", plan.round_id, report.accuracy,
             "n/a" if report.auc is None else f"{report.auc:.3f}")
    return RoundResult(plan, weights, tlog, report, votes)


def holdout(corpus: Sequence[AnnotatedImage], hconfig: HoldoutConfig, dconfig: DetectorConfig,
            tconfig: TrainConfig, post: Optional[PostprocessConfig] = None,
            max_workers: int = 1, checkpoint_for: Optional[Callable[[int], Checkpoint]] = None,
            progress: bool = False) -> Tuple[List[RoundResult], HoldoutSummary]:
    """split -> train_round -> evaluate for each round; rounds are independent and may run in parallel."""
    post = post or PostprocessConfig()
    plans = split(corpus, hconfig.fraction, hconfig.rounds, hconfig.seed)

    def run(plan: SplitPlan) -> RoundResult:
        ckpt = checkpoint_for(plan.round_id) if checkpoint_for is not None else None
        return _run_round(corpus, plan, dconfig, tconfig, post, ckpt, progress and max_workers == 1)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rounds = list(pool.map(run, plans))
    else:
        rounds = [run(plan) for plan in plans]
    return rounds, summarize(rounds, corpus)


def summarize(rounds: Sequence[RoundResult], corpus: Sequence[AnnotatedImage]) -> HoldoutSummary:
    truth = {item.subject_id: item.class_id for item in corpus}
    accuracy = [r.report.accuracy for r in rounds]
    aucs = [r.report.auc for r in rounds]
    defined = [a for a in aucs if a is not None]
    ious = [r.report.iou.frac_at_least_05 for r in rounds if r.report.iou is not None]
    subject_acc = {}
    for r in rounds:
        votes = r.subject_votes
        correct = sum(1 for s, c in votes.items() if c != ABSTAIN and c == truth[s])
        subject_acc[f"round{r.plan.round_id}"] = correct / len(votes) if votes else 0.0
    if subject_acc:
        subject_acc["mean"] = float(np.mean(list(subject_acc.values())))
    return HoldoutSummary(
        rounds=len(rounds),
        accuracy=accuracy,
        auc=aucs,
        mean_accuracy=float(np.mean(accuracy)),
        mean_auc=float(np.mean(defined)) if defined else None,
        mean_iou_at_least_05=float(np.mean(ious)) if ious else None,
        subject_level_supplementary=subject_acc,
    )
