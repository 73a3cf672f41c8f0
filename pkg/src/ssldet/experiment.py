"""End-to-end experiment harness: dataset preparation, the baseline run, the
pretraining-fraction sweep, scratch ablations, and report emission."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import contrastive, detect, metrics, nn
from .data import (
    Dataset,
    LabelBudget,
    SplitSpec,
    SynthConfig,
    fuse_dataset,
    generate_synthetic,
    load_dataset,
    partition_label_budget,
    split_dataset,
)

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = (
    "run,label_fraction,train_images,mAP,mAP50,mAP_small,AR,AR_small,mean_iou,iou_sigma,seconds"
)


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | load
    annotations: str | None = None
    image_dir: str | None = None
    fuse_iou: float = 0.2
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    outdir: str = "runs/exp"
    fractions: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    scratch_ablation: bool = False
    record_timing: bool = False
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    encoder: nn.EncoderConfig = field(default_factory=nn.EncoderConfig)
    ssl: contrastive.SSLConfig = field(default_factory=contrastive.SSLConfig)
    det: detect.DetConfig = field(default_factory=detect.DetConfig)
    eval: metrics.EvalConfig = field(default_factory=metrics.EvalConfig)

    def __post_init__(self):
        fr = self.fractions
        if any(not 0.0 < f < 1.0 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError(f"fractions must be strictly increasing in (0,1): {fr}")


@dataclass
class RunRecord:
    run_id: str
    label_fraction: float
    train_images: int
    metrics: metrics.MetricsReport | None = None
    agreement: metrics.AgreementReport | None = None
    checkpoints: dict[str, str] = field(default_factory=dict)
    seconds: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "label_fraction": self.label_fraction,
            "train_images": self.train_images,
            "metrics": self.metrics.to_dict() if self.metrics else None,
            "agreement": dataclasses.asdict(self.agreement) if self.agreement else None,
            "checkpoints": self.checkpoints,
            "seconds": self.seconds,
            "error": self.error,
        }


def derive_seed(global_seed: int, run_id: str) -> int:
    """Stable per-run seed from the global seed and a run identifier."""
    digest = hashlib.sha256(f"{global_seed}:{run_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def build_source_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Returns (raw, working) datasets; the working set has rater boxes fused."""
    if cfg.data.source == "synthetic":
        raw = generate_synthetic(cfg.data.synth)
    elif cfg.data.source == "load":
        if not cfg.data.annotations:
            raise ValueError("data.source=load requires data.annotations")
        raw = load_dataset(cfg.data.annotations, cfg.data.image_dir)
    else:
        raise ValueError(f"unknown data source {cfg.data.source!r}")
    if any(a.rater_id is not None for a in raw.annotations):
        return raw, fuse_dataset(raw, cfg.data.fuse_iou)
    return raw, raw


def prepare_splits(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset, Dataset]:
    raw, working = build_source_dataset(cfg)
    train, val, test = split_dataset(working, cfg.split)
    return raw, train, val, test


def _save_detections(dets_by_image: dict, path: Path) -> None:
    rows = []
    for image_id in sorted(dets_by_image):
        for d in dets_by_image[image_id]:
            rows.append(
                {
                    "image_id": image_id,
                    "category_id": d.class_id,
                    "bbox": list(d.box.to_xywh()),
                    "score": d.score,
                }
            )
    with open(path, "w") as f:
        json.dump(rows, f)


def execute_run(cfg: ExperimentConfig, run_id: str) -> RunRecord:
    """Run one experiment arm end to end and persist its artifacts.

    Run ids: "baseline", "ssl@<frac>" or "scratch@<frac>". SSL and scratch
    arms at the same fraction share the budget partition and the fine-tuning
    seed, so their trajectories differ only by encoder initialization.
    """
    t0 = time.perf_counter()
    rundir = Path(cfg.outdir) / run_id
    rundir.mkdir(parents=True, exist_ok=True)
    _, train, val, test = prepare_splits(cfg)

    if run_id == "baseline":
        fraction = None
        labeled = train
        encoder_init = None
    else:
        kind, _, frac_str = run_id.partition("@")
        if kind not in ("ssl", "scratch") or not frac_str:
            raise ValueError(f"bad run id {run_id!r}")
        fraction = float(frac_str)
        budget = LabelBudget(fraction, seed=derive_seed(cfg.seed, f"budget@{frac_str}"))
        unlabeled, labeled = partition_label_budget(train, budget)
        if kind == "ssl":
            ssl_seed = derive_seed(cfg.seed, f"pretrain@{frac_str}")
            params = nn.init_encoder_params(cfg.encoder, ssl_seed)
            params, history = contrastive.pretrain(
                params, unlabeled, replace(cfg.ssl, seed=ssl_seed), cfg.encoder
            )
            contrastive.write_loss_csv(history, rundir / "pretrain_loss.csv")
            nn.save_checkpoint(params, rundir / "encoder.ckpt")
            encoder_init = params
        else:
            encoder_init = None

    ft_tag = "baseline" if fraction is None else f"finetune@{run_id.partition('@')[2]}"
    ft_seed = derive_seed(cfg.seed, ft_tag)
    det_params, logs = detect.finetune(
        encoder_init, labeled, val, cfg.encoder, cfg.det, seed=ft_seed, eval_cfg=cfg.eval
    )
    nn.save_checkpoint(det_params, rundir / "detector.ckpt")
    detect.write_training_log(logs, rundir / "training_log.csv")

    anchors = detect.build_anchors(
        cfg.encoder.input_size, cfg.encoder.input_size // cfg.encoder.feature_size,
        cfg.det.anchor_sizes,
    )
    class_ids = labeled.class_ids()
    dets = detect.predict_dataset(det_params, test, anchors, class_ids, cfg.encoder, cfg.det)
    report = metrics.evaluate(
        [im.id for im in test.images], dets, test.annotations_by_image(), cfg.eval
    )
    agreement = metrics.model_gt_iou(test.annotations, dets, cfg.eval)
    _save_detections(dets, rundir / "detections.json")
    with open(rundir / "metrics.json", "w") as f:
        json.dump(report.to_dict(), f, indent=1)
    with open(rundir / "metrics.csv", "w") as f:
        f.write(metrics.report_csv(run_id, report, labeled.n_images))

    record = RunRecord(
        run_id=run_id,
        label_fraction=1.0 if fraction is None else round(1.0 - fraction, 10),
        train_images=labeled.n_images,
        metrics=report,
        agreement=agreement,
        checkpoints={
            p.name.removesuffix(".ckpt"): str(p)
            for p in (rundir / "encoder.ckpt", rundir / "detector.ckpt")
            if p.exists()
        },
        seconds=time.perf_counter() - t0,
    )
    with open(rundir / "run_record.json", "w") as f:
        json.dump(record.to_dict(), f, indent=1)
    return record


def _execute_run_safe(cfg: ExperimentConfig, run_id: str) -> RunRecord:
    try:
        return execute_run(cfg, run_id)
    except Exception as e:  # isolate per-run failures inside a sweep
        log.exception("run %s failed", run_id)
        kind, _, frac_str = run_id.partition("@")
        fraction = float(frac_str) if frac_str else None
        return RunRecord(
            run_id=run_id,
            label_fraction=1.0 if fraction is None else round(1.0 - fraction, 10),
            train_images=0,
            error=f"{type(e).__name__}: {e}",
        )


def sweep_plan(cfg: ExperimentConfig) -> list[str]:
    plan = ["baseline"] + [f"ssl@{f:g}" for f in cfg.fractions]
    if cfg.scratch_ablation:
        plan += [f"scratch@{f:g}" for f in cfg.fractions]
    return plan


def run_sweep(cfg: ExperimentConfig) -> list[RunRecord]:
    """Baseline plus one run per fraction (plus scratch ablations), with
    per-run failure isolation; emits summary, per-class AP and agreement CSVs."""
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    plan = sweep_plan(cfg)
    if cfg.workers > 1:
        # children read this at import; keeps BLAS threads from oversubscribing
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        ctx = get_context("spawn")
        with ProcessPoolExecutor(max_workers=cfg.workers, mp_context=ctx) as pool:
            futures = [pool.submit(_execute_run_safe, cfg, run_id) for run_id in plan]
            records = [f.result() for f in futures]
    else:
        records = [_execute_run_safe(cfg, run_id) for run_id in plan]

    write_summary_csv(records, outdir / "summary.csv", cfg.record_timing)
    raw, train, val, test = prepare_splits(cfg)
    write_per_class_csv(records, raw.categories, outdir / "per_class_ap.csv")
    write_agreement_csv(records, raw, test, cfg, outdir / "agreement.csv")
    return records


def write_summary_csv(records: list[RunRecord], path: Path, record_timing: bool) -> None:
    """Sweep summary; `seconds` is written as 0.0 unless timing is enabled so
    that equal configurations produce byte-identical files."""
    lines = [SUMMARY_COLUMNS]
    for r in records:
        if r.metrics is None:
            lines.append(f"{r.run_id},{r.label_fraction:g},,,,,,,,,")
            continue
        m = r.metrics
        seconds = f"{r.seconds:.1f}" if record_timing else "0.0"
        mean_iou = f"{r.agreement.mean_iou:.6f}" if r.agreement else ""
        sigma = f"{r.agreement.sigma:.6f}" if r.agreement else ""
        lines.append(
            f"{r.run_id},{r.label_fraction:g},{r.train_images},"
            f"{m.map:.6f},{m.map50:.6f},{m.map_small:.6f},{m.ar:.6f},{m.ar_small:.6f},"
            f"{mean_iou},{sigma},{seconds}"
        )
    path.write_text("\n".join(lines) + "\n")


def write_per_class_csv(records: list[RunRecord], categories, path: Path) -> None:
    names = {c.id: c.name for c in categories}
    lines = ["run,label_fraction,class_id,class_name,ap"]
    for r in records:
        if r.metrics is None:
            continue
        for cid, ap in sorted(r.metrics.per_class_ap.items()):
            lines.append(f"{r.run_id},{r.label_fraction:g},{cid},{names.get(cid, '?')},{ap:.6f}")
    path.write_text("\n".join(lines) + "\n")


def rater_pair_rows(raw: Dataset, image_ids: set[int], cfg: ExperimentConfig) -> list[tuple]:
    """(pair, AgreementReport) rows for every rater pair co-labeling the images."""
    annos = [a for a in raw.annotations if a.image_id in image_ids and a.rater_id is not None]
    raters = sorted({a.rater_id for a in annos})
    rows = []
    for i, ra in enumerate(raters):
        for rb in raters[i + 1 :]:
            rep = metrics.interobserver_iou(
                [a for a in annos if a.rater_id == ra],
                [a for a in annos if a.rater_id == rb],
                cfg.eval,
            )
            if rep is not None:
                rows.append((f"{ra} vs {rb}", rep))
    return rows


def write_agreement_csv(
    records: list[RunRecord], raw: Dataset, test: Dataset, cfg: ExperimentConfig, path: Path
) -> None:
    lines = ["row,mean_iou,sigma,n_pairs"]
    test_ids = {im.id for im in test.images}
    for pair, rep in rater_pair_rows(raw, test_ids, cfg):
        lines.append(f"{pair},{rep.mean_iou:.6f},{rep.sigma:.6f},{rep.n_pairs}")
    for r in records:
        if r.agreement is not None:
            a = r.agreement
            lines.append(f"{r.run_id},{a.mean_iou:.6f},{a.sigma:.6f},{a.n_pairs}")
    path.write_text("\n".join(lines) + "\n")
