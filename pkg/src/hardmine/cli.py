"""``hardmine`` command line: generate, train, evaluate, compare, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from hardmine.config import RunConfig, load_config
from hardmine.data import generate_dataset, load_dataset, load_ground_truth, save_dataset, write_jsonl
from hardmine.detector import GridDetector
from hardmine.errors import DataError, HardmineError, TrainingError
from hardmine.evaluation import (
    classify_frames,
    detection_to_json,
    evaluate_detections,
    load_detections,
    metrics_csv,
    metrics_table,
    pair_outcomes,
    pairwise_report,
)
from hardmine.losses import Variant
from hardmine.train import detect, train

log = logging.getLogger("hardmine")

# Head-to-head pairs in the order of the published tables.
COMPARISONS = (
    (Variant.BCE, Variant.FOCAL),
    (Variant.BCE, Variant.BALANCED_FOCAL),
    (Variant.BCE, Variant.LRM),
    (Variant.BCE, Variant.COMBINED),
    (Variant.LRM, Variant.COMBINED),
    (Variant.BALANCED_FOCAL, Variant.COMBINED),
)


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "variant", None):
        cfg = dataclasses.replace(cfg, loss=cfg.loss.with_variant(args.variant))
    return cfg


def _write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _check_grid(model: GridDetector, frames) -> None:
    size = frames[0].image.shape
    if size != (model.grid.image_size, model.grid.image_size):
        raise DataError(f"model grid expects {model.grid.image_size}px frames, dataset has {size[1]}x{size[0]}")


def _generate(cfg: RunConfig, split: str, count: int, out) -> dict:
    spec = cfg.scene_for(split)
    spec.validate(coarsest_stride=cfg.grid.strides[-1])
    first_id = 0 if split == "train" else 1_000_000
    frames = generate_dataset(spec, count, first_id=first_id)
    save_dataset(frames, out, spec)
    positives = sum(f.box is not None for f in frames)
    return {"frames": len(frames), "positives": positives, "positive_ratio": positives / len(frames)}


def cmd_generate(args) -> int:
    cfg = _config(args)
    count = args.count or (cfg.data.train_frames if args.split == "train" else cfg.data.test_frames)
    summary = _generate(cfg, args.split, count, args.out)
    print(f"wrote {summary['frames']} frames to {args.out}: {summary['positives']} positives "
          f"(ratio {summary['positive_ratio']:.3f})")
    return 0


def _train_variant(cfg: RunConfig, frames, model_path, log_path, variant=None):
    tcfg = cfg.train_config(variant)
    started = time.perf_counter()
    records = []

    def on_epoch(rec):
        records.append({k: (float(v) if k != "epoch" else v) for k, v in rec.items()})
        log.info("%s epoch %d/%d loss %.5f", tcfg.loss.variant.value, rec["epoch"], tcfg.epochs, rec["loss"])

    try:
        result = train(frames, tcfg, cfg.grid, callback=on_epoch)
    finally:
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            write_jsonl(log_path, [{"variant": tcfg.loss.variant.value, **r} for r in records])
    Path(model_path).parent.mkdir(parents=True, exist_ok=True)
    result.model.save(model_path, seed=cfg.seed, variant=tcfg.loss.variant.value, config=cfg.to_dict())
    log.info("trained %s in %.1fs", tcfg.loss.variant.value, time.perf_counter() - started)
    return result


def cmd_train(args) -> int:
    cfg = _config(args)
    frames = load_dataset(args.data)
    if frames[0].image.shape[0] != cfg.grid.image_size:
        raise DataError(f"dataset frames are {frames[0].image.shape[0]}px, grid expects {cfg.grid.image_size}px")
    log_path = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    result = _train_variant(cfg, frames, args.out, log_path)
    last = result.history[-1]
    print(f"{cfg.loss.variant.label}: {len(result.history)} epochs, final loss {last['loss']:.6f} "
          f"(box {last['box']:.6f}, objectness {last['objectness']:.6f}) -> {args.out}")
    return 0


def _evaluate(cfg: RunConfig, model, frames, dets_path, name=""):
    _check_grid(model, frames)
    e = cfg.eval
    dets = detect(model, frames, e.min_conf, e.nms_iou, e.max_det)
    Path(dets_path).parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(dets_path, (detection_to_json(d) for d in dets))
    gts = {f.frame_id: f.box for f in frames}
    return evaluate_detections(load_detections(dets_path), gts, e.conf_thr, e.iou_thr, name=name)


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    model, header = GridDetector.load(args.model)
    frames = load_dataset(args.data)
    report = _evaluate(cfg, model, frames, args.out, name=header.get("variant", Path(args.model).stem))
    print(metrics_table([report]))
    if args.csv:
        _write_text(args.csv, metrics_csv([report]))
    return 0


def _compare(cfg: RunConfig, path_a, path_b, gts, names):
    e = cfg.eval
    a = classify_frames(load_detections(path_a), gts, e.conf_thr, e.iou_thr)
    b = classify_frames(load_detections(path_b), gts, e.conf_thr, e.iou_thr)
    return pairwise_report(pair_outcomes(a, b), *names)


def cmd_compare(args) -> int:
    cfg = _config(args)
    gts = load_ground_truth(args.gt)
    names = args.names or (Path(args.m1).stem, Path(args.m2).stem)
    report = _compare(cfg, args.m1, args.m2, gts, names)
    print(report.to_text())
    if args.out:
        _write_text(args.out, report.to_csv())
    return 0


def cmd_report(args) -> int:
    """Generate both splits, train every variant, evaluate, and tabulate."""
    cfg = _config(args)
    out = Path(args.out)
    variants = [Variant.parse(v) for v in args.variants] if args.variants else list(Variant)
    split_summary = {}
    for split, count in (("train", cfg.data.train_frames), ("test", cfg.data.test_frames)):
        split_summary[split] = _generate(cfg, split, count, out / "data" / split)
    train_frames = load_dataset(out / "data" / "train")
    test_frames = load_dataset(out / "data" / "test")
    reports = {}
    for v in variants:
        model_path = out / "models" / f"{v.value}.bin"
        result = _train_variant(cfg, train_frames, model_path, out / "logs" / f"{v.value}.jsonl", v)
        reports[v] = _evaluate(cfg, result.model, test_frames, out / "detections" / f"{v.value}.jsonl", v.label)
    ordered = [reports[v] for v in variants]
    table = metrics_table(ordered)
    _write_text(out / "metrics.txt", table)
    _write_text(out / "metrics.csv", metrics_csv(ordered))
    print(table)
    gts = load_ground_truth(out / "data" / "test" / "gt.jsonl")
    pairwise = {}
    for m1, m2 in COMPARISONS:
        if m1 not in reports or m2 not in reports:
            continue
        rep = _compare(
            cfg, out / "detections" / f"{m1.value}.jsonl", out / "detections" / f"{m2.value}.jsonl", gts, (m1.label, m2.label)
        )
        stem = out / "pairwise" / f"{m1.value}_vs_{m2.value}"
        _write_text(stem.with_suffix(".txt"), rep.to_text())
        _write_text(stem.with_suffix(".csv"), rep.to_csv())
        pairwise[f"{m1.value}_vs_{m2.value}"] = {"net_delta": rep.net_delta, "gained": rep.gained, "lost": rep.lost}
        print()
        print(rep.to_text())
    summary = {
        "seed": cfg.seed,
        "splits": split_summary,
        "metrics": {v.value: reports[v].to_dict() for v in variants},
        "pairwise": pairwise,
    }
    _write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hardmine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant=False):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        if variant:
            p.add_argument("--variant", help="bce | focal | balanced_focal | lrm | combined")

    p = sub.add_parser("generate", help="render a synthetic dataset split")
    common(p)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--count", type=int, help="frame count (defaults to the split size in the config)")
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one loss variant")
    common(p, variant=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run a model on a dataset and score it")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="detections JSON-lines file")
    p.add_argument("--csv", help="also write the metrics as CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="head-to-head frame pairing of two detection files")
    common(p)
    p.add_argument("m1", help="detections of method M1")
    p.add_argument("m2", help="detections of method M2")
    p.add_argument("--gt", required=True, help="ground-truth JSON-lines file")
    p.add_argument("--names", nargs=2, metavar=("M1", "M2"))
    p.add_argument("--out", help="write the report as CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="full experiment: all variants, metrics and pairwise tables")
    common(p)
    p.add_argument("--variants", nargs="+", help="subset of variants (default: all five)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except TrainingError as exc:
        where = f" (epoch {exc.epoch})" if exc.epoch is not None else ""
        print(f"hardmine: training failed{where}: {exc}", file=sys.stderr)
        return exc.exit_code
    except HardmineError as exc:
        print(f"hardmine: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hardmine: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
