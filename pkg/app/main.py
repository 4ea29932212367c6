import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

import ccdet
from app.schemas import (AnchorReport, CamBatchRecord, CamRecord, PredictRecord, RoundRecord,
                         RunManifest, TrainSummary)
from app.settings import RunConfig, load_run_config, settings, write_run_config
from app.weightfile import load_weights, save_weights
from ccdet import dataset, eigencam, evalmetrics, train
from ccdet.dataset import APD, CLASS_NAMES, AnnotatedImage
from ccdet.detector import anchor_fit, kmeans_anchors
from ccdet.errors import (ConfigError, DatasetError, DivergenceError, MetricError, ShapeError,
                          WeightFileError)
from ccdet.imaging import draw_box, gray_to_rgb, load_gray_png, resize_bilinear, save_rgb_png
from ccdet.inference import infer

log = logging.getLogger("ccdet.cli")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
_USAGE_ERRORS = (ValidationError, ConfigError, DatasetError, WeightFileError, MetricError, ShapeError)


# ============================================================
# Helpers
# ============================================================

def _run_dir(base: Optional[Path], command: str) -> Path:
    root = Path(base) if base is not None else settings.RUNS_DIR
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    out = root / f"{command}-{stamp}"
    n = 1
    while out.exists():
        n += 1
        out = root / f"{command}-{stamp}-{n}"
    out.mkdir(parents=True)
    return out


def _archive(out: Path, command: str, config: Optional[RunConfig], argv: Sequence[str]) -> None:
    manifest = RunManifest(command=command, version=ccdet.__version__,
                           started=datetime.now().isoformat(timespec="seconds"), argv=list(argv))
    (out / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    if config is not None:
        write_run_config(config, out / "config.json")


def _overrides(args: argparse.Namespace) -> dict:
    keys = ("epochs", "batch_size", "lr", "seed", "width_base", "input_size",
            "conf_threshold", "iou_threshold", "rounds")
    out = {k: getattr(args, k, None) for k in keys}
    layers = getattr(args, "layers", None)
    if layers:
        out["layers"] = [s.strip() for s in layers.split(",") if s.strip()]
    return out


def _model_config(args: argparse.Namespace) -> RunConfig:
    """--config, else the config.json archived beside the model (or one level up)."""
    path = args.config
    if path is None:
        model = Path(args.model)
        for candidate in (model.parent / "config.json", model.parent.parent / "config.json"):
            if candidate.is_file():
                path = candidate
                break
    if path is None:
        log.warning("no config given or found next to %s; using defaults", args.model)
    return load_run_config(path, _overrides(args))


def _load_images(path: Path, size: int) -> List[Tuple[str, np.ndarray, Optional[AnnotatedImage]]]:
    """(name, S x S image, annotation if any) for a PNG file, a corpus directory or a folder of PNGs."""
    path = Path(path)
    if path.is_dir() and (path / dataset.ANNOTATIONS_FILE).is_file():
        return [(item.name, item.image, item) for item in dataset.load_corpus(path)]
    files = sorted(path.glob("*.png")) if path.is_dir() else [path]
    if not files or not all(f.is_file() for f in files):
        raise DatasetError(f"{path}: no PNG images found")
    out = []
    for f in files:
        image = load_gray_png(f)
        if image.shape != (size, size):
            log.info("%s: resizing %dx%d -> %dx%d", f.name, image.shape[1], image.shape[0], size, size)
            image = np.clip(resize_bilinear(image, (size, size)), 0.0, 1.0)
        out.append((f.name, image, None))
    return out


def _read_split(path: Optional[Path]) -> Optional[dataset.SplitPlan]:
    if path is None:
        return None
    try:
        return dataset.SplitPlan.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"split file not found: {path}") from e


# ============================================================
# Commands
# ============================================================

def cmd_synth(args: argparse.Namespace) -> int:
    if args.subjects < 2 or args.subjects % 2:
        raise ConfigError(f"--subjects must be an even number >= 2 (half HC, half APD), got {args.subjects}")
    corpus = dataset.generate_synthetic(args.subjects // 2, args.slices, args.size, args.seed)
    dataset.save_corpus(corpus, Path(args.out))
    summary = dataset.describe_corpus(corpus)
    print(f"wrote {summary.n_images} images ({summary.n_subjects} subjects: "
          f"{', '.join(f'{k}={v}' for k, v in summary.subjects_per_class.items())}) to {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config = load_run_config(args.config, _overrides(args))
    corpus = dataset.load_corpus(Path(args.data))
    out = _run_dir(args.out, "train")
    _archive(out, "train", config, argv)
    log.info("run directory: %s", out)

    def checkpoint_for(round_id: int):
        round_dir = out / f"round{round_id}"
        round_dir.mkdir(exist_ok=True)
        return lambda weights, epoch: save_weights(weights, round_dir / "weights.ccyd")

    rounds, summary = train.holdout(corpus, config.holdout, config.detector, config.train,
                                    config.postprocess, max_workers=args.workers,
                                    checkpoint_for=checkpoint_for, progress=settings.PROGRESS)
    records = []
    for r in rounds:
        round_dir = out / f"round{r.plan.round_id}"
        r.log.to_csv(round_dir / "train_log.csv")
        evalmetrics.write_report_json(r.report, round_dir / "report.json")
        evalmetrics.write_curves(r.report, round_dir)
        (round_dir / "split.json").write_text(r.plan.model_dump_json(indent=2), encoding="utf-8")
        records.append(RoundRecord(
            round_id=r.plan.round_id,
            weights=f"round{r.plan.round_id}/weights.ccyd",
            train_log=f"round{r.plan.round_id}/train_log.csv",
            report=f"round{r.plan.round_id}/report.json",
            split=f"round{r.plan.round_id}/split.json",
            accuracy=r.report.accuracy,
            auc=r.report.auc,
            steps=r.log.steps,
        ))
    result = TrainSummary(corpus=dataset.describe_corpus(corpus), holdout=summary, rounds=records)
    (out / "summary.json").write_text(result.model_dump_json(indent=2), encoding="utf-8")

    for rec in records:
        auc = "n/a" if rec.auc is None else f"{rec.auc:.3f}"
        print(f"round {rec.round_id}: accuracy={rec.accuracy:.3f} auc={auc}")
    mean_auc = "n/a" if summary.mean_auc is None else f"{summary.mean_auc:.3f}"
    print(f"mean accuracy={summary.mean_accuracy:.3f} mean auc={mean_auc} -> {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config = _model_config(args)
    weights = load_weights(Path(args.model), config.detector)
    corpus = dataset.load_corpus(Path(args.data))
    plan = _read_split(args.split)
    images = dataset.select(corpus, plan.test_subjects) if plan is not None else corpus
    if not images:
        raise MetricError("no test images selected")

    report, _ = train.evaluate(weights, images, config.postprocess)
    out = _run_dir(args.out, "eval")
    _archive(out, "eval", config, argv)
    evalmetrics.write_report_json(report, out / "report.json")
    evalmetrics.write_curves(report, out)
    auc = "n/a" if report.auc is None else f"{report.auc:.3f}"
    print(f"{report.n_images} images: accuracy={report.accuracy:.3f} auc={auc} -> {out}")
    for note in report.notes:
        print(f"note: {note}")
    return EXIT_OK


def cmd_cam(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config = _model_config(args)
    weights = load_weights(Path(args.model), config.detector)
    layers = list(config.cam.layers)
    out = _run_dir(args.out, "cam")
    _archive(out, "cam", config, argv)
    path = Path(args.image)

    if path.is_dir() and (path / dataset.ANNOTATIONS_FILE).is_file():
        corpus = dataset.load_corpus(path)
        plan = _read_split(args.split)
        items = dataset.select(corpus, plan.test_subjects) if plan is not None else corpus
        if args.only_class != "all":
            wanted = CLASS_NAMES.index(args.only_class)
            items = [item for item in items if item.class_id == wanted]
        include = (lambda item, r: r.verdict.predicted_class == item.class_id) if args.correct_only else None
        avg = eigencam.average_cam(weights, items, layers, config.postprocess, include)
        eigencam.save_heatmap_png(avg.heatmap, out / "average_cam.png")
        record = CamBatchRecord(heatmap="average_cam.png", layers=layers, stats=avg.stats)
        (out / "cam_stats.json").write_text(record.model_dump_json(indent=2), encoding="utf-8")
        rate = avg.stats.brightest_in_region_rate
        print(f"average CAM over {avg.stats.n_used} image(s) ({avg.stats.n_abstained} abstained); "
              f"brightest-in-midbody rate={'n/a' if rate is None else f'{rate:.3f}'} -> {out}")
        return EXIT_OK

    records = []
    for name, image, item in _load_images(path, config.detector.input_size):
        heatmap, result = eigencam.explain(weights, image, layers, config.postprocess)
        stem = Path(name).stem
        eigencam.save_heatmap_png(heatmap, out / f"{stem}_cam.png")
        eigencam.save_overlay_png(image, heatmap, out / f"{stem}_overlay.png", result)
        v = result.verdict
        stats = None
        if item is not None and item.gt_region_mask is not None:
            stats = eigencam.cam_stats(heatmap, item.gt_region_mask)
        if v.abstained:
            log.warning("%s: no detection above %.2f; CAM covers the full image",
                        name, config.postprocess.conf_threshold)
        records.append(CamRecord(image=name, heatmap=f"{stem}_cam.png", overlay=f"{stem}_overlay.png",
                                 abstained=v.abstained,
                                 predicted_class=None if v.abstained else CLASS_NAMES[v.predicted_class],
                                 confidence=v.confidence, stats=stats))
    (out / "cam_stats.json").write_text(
        json.dumps([r.model_dump(mode="json") for r in records], indent=2), encoding="utf-8")
    print(f"wrote {len(records)} heatmap(s) -> {out}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config = _model_config(args)
    weights = load_weights(Path(args.model), config.detector)
    loaded = _load_images(Path(args.image), config.detector.input_size)
    out = _run_dir(args.out, "predict")
    _archive(out, "predict", config, argv)

    results = infer(weights, [image for _, image, _ in loaded], config.postprocess)
    records = []
    for (name, image, _), result in zip(loaded, results):
        v = result.verdict
        rgb = gray_to_rgb(image)
        if not v.abstained:
            color = (255, 64, 64) if v.predicted_class == APD else (64, 255, 64)
            rgb = draw_box(rgb, v.detection.box, f"{CLASS_NAMES[v.predicted_class]} {v.confidence:.2f}", color)
        overlay = f"{Path(name).stem}_pred.png"
        save_rgb_png(out / overlay, rgb)
        records.append(PredictRecord(
            image=name,
            predicted_class=None if v.abstained else CLASS_NAMES[v.predicted_class],
            confidence=v.confidence,
            box=None if v.abstained else v.detection.box,
            class_scores=[] if v.abstained else list(v.detection.class_scores),
            overlay=overlay,
        ))
    (out / "predictions.json").write_text(
        json.dumps([r.model_dump(mode="json") for r in records], indent=2), encoding="utf-8")
    n_abstain = sum(r.predicted_class is None for r in records)
    print(f"{len(records)} image(s), {n_abstain} abstained -> {out}")
    return EXIT_OK


def cmd_anchors(args: argparse.Namespace) -> int:
    wh = dataset.sample_box_sizes(args.samples, args.size, args.seed)
    anchors = kmeans_anchors(wh, seed=args.seed)
    fit = anchor_fit(wh, anchors)
    report = AnchorReport(
        samples=args.samples, size=args.size, seed=args.seed,
        anchors=[list(scale) for scale in anchors],
        mean_best_ratio=float(fit.mean()),
        coverage={"ratio<2": float((fit < 2.0).mean()), "ratio<4": float((fit < 4.0).mean())},
    )
    print(report.model_dump_json(indent=2))
    if args.out:
        Path(args.out).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return EXIT_OK


# ============================================================
# Entry point
# ============================================================

def _add_overrides(p: argparse.ArgumentParser, training: bool = False) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON run config")
    p.add_argument("--width-base", type=int, default=None)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--conf-threshold", type=float, default=None)
    p.add_argument("--iou-threshold", type=float, default=None)
    if training:
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccdet", description="CC detector / classifier with Eigen-CAM")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--subjects", type=int, default=40, help="total subjects, half per class")
    p.add_argument("--slices", type=int, default=8)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="hold-out training and evaluation")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help=f"base directory (default {settings.RUNS_DIR})")
    p.add_argument("--workers", type=int, default=1, help="rounds trained in parallel")
    _add_overrides(p, training=True)

    p = sub.add_parser("eval", help="evaluate a weight file")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", type=Path, default=None, help="split.json; evaluates its test subjects")
    p.add_argument("--out", type=Path, default=None)
    _add_overrides(p)

    p = sub.add_parser("cam", help="Eigen-CAM heatmaps")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True, help="PNG, folder of PNGs, or corpus directory")
    p.add_argument("--layers", default=None, help="comma-separated capture points")
    p.add_argument("--split", type=Path, default=None)
    p.add_argument("--only-class", choices=("all",) + CLASS_NAMES, default="all")
    p.add_argument("--correct-only", action="store_true")
    p.add_argument("--out", type=Path, default=None)
    _add_overrides(p)

    p = sub.add_parser("predict", help="detection overlays with class score")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    _add_overrides(p)

    p = sub.add_parser("anchors", help="k-means anchors over generator boxes")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, settings.LOG_LEVEL, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers = {
        "synth": lambda: cmd_synth(args),
        "train": lambda: cmd_train(args, argv),
        "eval": lambda: cmd_eval(args, argv),
        "cam": lambda: cmd_cam(args, argv),
        "predict": lambda: cmd_predict(args, argv),
        "anchors": lambda: cmd_anchors(args),
    }
    try:
        return handlers[args.command]()
    except DivergenceError as e:
        print(f"error: training diverged at epoch {e.epoch}, step {e.step}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
