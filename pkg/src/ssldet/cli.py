"""Command-line harness.

Sub-commands: gen-data, fuse, split, pretrain, finetune, evaluate, agreement,
sweep. Each reads one INI config (see configs/default.ini) plus repeatable
`--set section.key=value` overrides; flags win over file values.

Exit codes: 0 success, 1 config error, 2 data error, 3 training divergence,
4 partial sweep failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import contrastive, detect, metrics, nn
from .config import ConfigError, load_config
from .data import (
    DataError,
    SplitSpec,
    fuse_dataset,
    generate_synthetic,
    load_dataset,
    partition_label_budget,
    save_dataset,
    split_dataset,
)
from .data import LabelBudget
from .experiment import derive_seed, rater_pair_rows, run_sweep

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3
EXIT_PARTIAL = 4

log = logging.getLogger(__name__)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", default=None, help="INI config file")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    p.add_argument("--seed", type=int, default=None, help="override experiment.seed")
    p.add_argument("-o", "--outdir", default=None, help="override experiment.outdir")


def _load(args) -> "ExperimentConfig":  # noqa: F821
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    if args.outdir is not None:
        overrides.append(f"experiment.outdir={args.outdir}")
    return load_config(args.config, overrides)


def _load_with_images(annotations: str, image_dir: str | None):
    image_dir = image_dir or str(Path(annotations).parent / "images")
    return load_dataset(annotations, image_dir)


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    ds = generate_synthetic(cfg.data.synth)
    out = Path(cfg.outdir)
    save_dataset(ds, out)
    print(f"wrote {ds.n_images} images, {len(ds.annotations)} annotations to {out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg = _load(args)
    ds = _load_with_images(args.annotations, args.images)
    fused = fuse_dataset(ds, cfg.data.fuse_iou)
    save_dataset(fused, Path(cfg.outdir))
    print(f"fused {len(ds.annotations)} -> {len(fused.annotations)} annotations")
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _load(args)
    ds = _load_with_images(args.annotations, args.images)
    train, val, test = split_dataset(ds, cfg.split)
    out = Path(cfg.outdir)
    for name, part in (("train", train), ("val", val), ("test", test)):
        save_dataset(part, out / name)
    print(f"split {ds.n_images} -> {train.n_images}/{val.n_images}/{test.n_images}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    ds = _load_with_images(args.annotations, args.images)
    if args.fraction is not None:
        budget = LabelBudget(args.fraction, seed=derive_seed(cfg.seed, f"budget@{args.fraction:g}"))
        ds, _ = partition_label_budget(ds, budget)
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    ssl_seed = derive_seed(cfg.seed, "pretrain")
    params = nn.init_encoder_params(cfg.encoder, ssl_seed)
    params, history = contrastive.pretrain(params, ds, replace(cfg.ssl, seed=ssl_seed), cfg.encoder)
    nn.save_checkpoint(params, out / "encoder.ckpt")
    contrastive.write_loss_csv(history, out / "pretrain_loss.csv")
    print(f"pretrained on {ds.n_images} images for {cfg.ssl.epochs} epochs -> {out / 'encoder.ckpt'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load(args)
    train = _load_with_images(args.train, args.images)
    val = _load_with_images(args.val, args.images)
    encoder_init = nn.load_checkpoint(args.encoder) if args.encoder else None
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    params, logs = detect.finetune(
        encoder_init, train, val, cfg.encoder, cfg.det,
        seed=derive_seed(cfg.seed, "finetune"), eval_cfg=cfg.eval,
    )
    nn.save_checkpoint(params, out / "detector.ckpt")
    detect.write_training_log(logs, out / "training_log.csv")
    best = max((e.val_map for e in logs), default=0.0)
    print(f"fine-tuned on {train.n_images} images; best val mAP {best:.4f}")
    return EXIT_OK


def _predict_all(cfg, params, ds):
    anchors = detect.build_anchors(
        cfg.encoder.input_size, cfg.encoder.input_size // cfg.encoder.feature_size,
        cfg.det.anchor_sizes,
    )
    return detect.predict_dataset(params, ds, anchors, ds.class_ids(), cfg.encoder, cfg.det)


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    test = _load_with_images(args.test, args.images)
    params = nn.load_checkpoint(args.detector)
    dets = _predict_all(cfg, params, test)
    report = metrics.evaluate(
        [im.id for im in test.images], dets, test.annotations_by_image(), cfg.eval
    )
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.json", "w") as f:
        json.dump(report.to_dict(), f, indent=1)
    (out / "metrics.csv").write_text(metrics.report_csv(args.run_name, report, test.n_images))
    rows = []
    for image_id in sorted(dets):
        for d in dets[image_id]:
            rows.append({"image_id": image_id, "category_id": d.class_id,
                         "bbox": list(d.box.to_xywh()), "score": d.score})
    with open(out / "detections.json", "w") as f:
        json.dump(rows, f)
    print(f"mAP {report.map:.4f}  mAP50 {report.map50:.4f}  AR {report.ar:.4f}")
    return EXIT_OK


def cmd_agreement(args) -> int:
    cfg = _load(args)
    raw = _load_with_images(args.annotations, args.images)
    if not any(a.rater_id is not None for a in raw.annotations):
        raise DataError("agreement needs a dataset with rater ids")
    lines = ["row,mean_iou,sigma,n_pairs"]
    image_ids = {im.id for im in raw.images}
    for pair, rep in rater_pair_rows(raw, image_ids, cfg):
        lines.append(f"{pair},{rep.mean_iou:.6f},{rep.sigma:.6f},{rep.n_pairs}")
    if args.detector:
        fused = fuse_dataset(raw, cfg.data.fuse_iou)
        params = nn.load_checkpoint(args.detector)
        dets = _predict_all(cfg, params, fused)
        rep = metrics.model_gt_iou(fused.annotations, dets, cfg.eval)
        if rep is not None:
            lines.append(f"model,{rep.mean_iou:.6f},{rep.sigma:.6f},{rep.n_pairs}")
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "agreement.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    records = run_sweep(cfg)
    failures = [r for r in records if r.error]
    for r in records:
        status = f"FAILED: {r.error}" if r.error else f"mAP {r.metrics.map:.4f}"
        print(f"{r.run_id:>14}  labels={r.label_fraction:g}  n={r.train_images}  {status}")
    print(f"summary: {Path(cfg.outdir) / 'summary.csv'}")
    return EXIT_PARTIAL if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssldet", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    _add_common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("fuse", help="fuse multi-rater boxes into averaged boxes")
    _add_common(sp)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--images", default=None)
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("split", help="train/val/test split")
    _add_common(sp)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--images", default=None)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("pretrain", help="contrastive pretraining on unlabeled images")
    _add_common(sp)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--images", default=None)
    sp.add_argument("--fraction", type=float, default=None,
                    help="pretrain on this fraction of the input instead of all of it")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="train the detector on labeled images")
    _add_common(sp)
    sp.add_argument("--train", required=True)
    sp.add_argument("--val", required=True)
    sp.add_argument("--images", default=None)
    sp.add_argument("--encoder", default=None, help="pretrained encoder checkpoint")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("evaluate", help="COCO-style metrics for a checkpoint")
    _add_common(sp)
    sp.add_argument("--detector", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--images", default=None)
    sp.add_argument("--run-name", default="run")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("agreement", help="inter-rater and model-vs-GT IoU statistics")
    _add_common(sp)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--images", default=None)
    sp.add_argument("--detector", default=None)
    sp.set_defaults(func=cmd_agreement)

    sp = sub.add_parser("sweep", help="baseline + pretraining-fraction sweep")
    _add_common(sp)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except detect.TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except nn.NonFiniteError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
