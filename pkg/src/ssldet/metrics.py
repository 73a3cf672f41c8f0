"""COCO-style detection metrics (AP/AR over IoU thresholds, size strata,
per-class tables) and inter-observer agreement statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Annotation
from .geometry import ScoredBox, iou_matrix

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    recall_points: int = 101
    max_dets: int = 100
    small_area: float = 1024.0
    agreement_iou: float = 0.2
    sample_sigma: bool = False

    def __post_init__(self):
        ts = self.iou_thresholds
        if any(not 0.0 <= t <= 1.0 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"iou_thresholds must be strictly increasing in [0,1]: {ts}")


@dataclass
class MetricsReport:
    map: float
    map50: float
    map_small: float
    ar: float
    ar_small: float
    per_class_ap: dict[int, float]
    n_images: int
    n_gt: int
    n_detections: int

    def to_dict(self) -> dict:
        return {
            "mAP": self.map,
            "mAP50": self.map50,
            "mAP_small": self.map_small,
            "AR": self.ar,
            "AR_small": self.ar_small,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "n_images": self.n_images,
            "n_gt": self.n_gt,
            "n_detections": self.n_detections,
        }


@dataclass
class AgreementReport:
    mean_iou: float
    sigma: float
    n_pairs: int


def match_for_pr(
    det_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    gt_ignored: np.ndarray,
    iou_t: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy one-image, one-class matching at an IoU threshold.

    Detections must already be in descending-score order. Each detection
    matches the unmatched GT of highest IoU >= iou_t (ties to the lower GT
    index). Flags: 1 TP, 0 FP, -1 dropped (matched to an ignored GT).
    """
    ious = iou_matrix(det_boxes, gt_boxes) if len(det_boxes) and len(gt_boxes) else np.zeros(
        (len(det_boxes), len(gt_boxes))
    )
    return _match_from_ious(ious, np.asarray(gt_ignored, dtype=bool), iou_t)


def _match_from_ious(
    ious: np.ndarray, gt_ignored: np.ndarray, iou_t: float
) -> tuple[np.ndarray, np.ndarray]:
    n_det, n_gt = ious.shape
    flags = np.zeros(n_det, dtype=np.int64)
    matched = np.zeros(n_gt, dtype=bool)
    for i in range(n_det):
        best_j = -1
        best_iou = 0.0
        row = ious[i]
        for j in range(n_gt):
            if matched[j] or row[j] < iou_t:
                continue
            if best_j < 0 or row[j] > best_iou:
                best_j, best_iou = j, row[j]
        if best_j < 0:
            flags[i] = 0
        else:
            matched[best_j] = True
            flags[i] = -1 if gt_ignored[best_j] else 1
    return flags, matched


def average_precision(tp: np.ndarray, n_gt: int, recall_points: int = 101) -> float:
    """AP from a globally-ranked TP/FP sequence: precision envelope sampled
    on an evenly spaced recall grid."""
    if n_gt <= 0:
        raise ValueError("average_precision needs n_gt >= 1")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, recall_points)
    idx = np.searchsorted(recall, grid, side="left")
    valid = idx < len(recall)
    return float(np.where(valid, envelope[np.minimum(idx, len(recall) - 1)], 0.0).mean())


def _sigma(values: np.ndarray, sample: bool) -> float:
    if sample and len(values) > 1:
        return float(np.std(values, ddof=1))
    return float(np.std(values))


def evaluate(
    image_ids: list[int],
    dets_by_image: dict[int, list[ScoredBox]],
    gts_by_image: dict[int, list[Annotation]],
    cfg: EvalConfig | None = None,
) -> MetricsReport:
    """COCO-style report over a set of images.

    GT outside a stratum's area range becomes "ignore": detections matched
    to it count neither as TP nor FP. Classes with zero GT in a stratum are
    excluded from that stratum's class mean.
    """
    cfg = cfg or EvalConfig()
    all_gts = [g for i in image_ids for g in gts_by_image.get(i, [])]
    if not all_gts:
        raise ValueError("no ground truth in any image; metrics undefined")
    classes = sorted({g.class_id for g in all_gts})
    n_detections = sum(len(dets_by_image.get(i, [])) for i in image_ids)

    capped: dict[int, list[ScoredBox]] = {}
    for i in image_ids:
        dets = dets_by_image.get(i, [])
        order = np.argsort(-np.array([d.score for d in dets]), kind="stable") if dets else []
        capped[i] = [dets[j] for j in order[: cfg.max_dets]]

    strata = {"all": (0.0, np.inf), "small": (0.0, cfg.small_area)}
    # ap[stratum][class] -> per-threshold list; rec likewise
    ap: dict[str, dict[int, list[float]]] = {s: {} for s in strata}
    rec: dict[str, dict[int, list[float]]] = {s: {} for s in strata}

    for cls in classes:
        per_image = []
        for i in image_ids:
            dets = [d for d in capped[i] if d.class_id == cls]
            scores = np.array([d.score for d in dets], dtype=np.float64)
            order = np.argsort(-scores, kind="stable")
            dets = [dets[j] for j in order]
            scores = scores[order]
            gts = [g for g in gts_by_image.get(i, []) if g.class_id == cls]
            dboxes = np.stack([d.box.as_array() for d in dets]) if dets else np.zeros((0, 4))
            gboxes = np.stack([g.box.as_array() for g in gts]) if gts else np.zeros((0, 4))
            areas = (gboxes[:, 2] - gboxes[:, 0]) * (gboxes[:, 3] - gboxes[:, 1])
            ious = iou_matrix(dboxes, gboxes) if dets and gts else np.zeros((len(dets), len(gts)))
            per_image.append((scores, ious, areas))

        for name, (lo, hi) in strata.items():
            n_gt = sum(int(((a >= lo) & (a < hi)).sum()) for _, _, a in per_image)
            if n_gt == 0:
                continue
            ap_ts, rec_ts = [], []
            for t in cfg.iou_thresholds:
                all_scores, all_flags, n_matched = [], [], 0
                for scores, ious, areas in per_image:
                    ignored = ~((areas >= lo) & (areas < hi))
                    flags, matched = _match_from_ious(ious, ignored, t)
                    keep = flags >= 0
                    all_scores.append(scores[keep])
                    all_flags.append(flags[keep])
                    n_matched += int((matched & ~ignored).sum())
                scores = np.concatenate(all_scores)
                flags = np.concatenate(all_flags)
                order = np.argsort(-scores, kind="stable")
                ap_ts.append(average_precision(flags[order], n_gt, cfg.recall_points))
                rec_ts.append(n_matched / n_gt)
            ap[name][cls] = ap_ts
            rec[name][cls] = rec_ts

    per_class_ap = {cls: float(np.mean(ts)) for cls, ts in ap["all"].items()}
    t50 = cfg.iou_thresholds.index(0.5) if 0.5 in cfg.iou_thresholds else 0

    def stratum_map(name: str) -> float:
        vals = [float(np.mean(ts)) for ts in ap[name].values()]
        return float(np.mean(vals)) if vals else 0.0

    def stratum_ar(name: str) -> float:
        vals = [float(np.mean(ts)) for ts in rec[name].values()]
        return float(np.mean(vals)) if vals else 0.0

    map50 = float(np.mean([ts[t50] for ts in ap["all"].values()])) if ap["all"] else 0.0
    return MetricsReport(
        map=float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0,
        map50=map50,
        map_small=stratum_map("small"),
        ar=stratum_ar("all"),
        ar_small=stratum_ar("small"),
        per_class_ap=per_class_ap,
        n_images=len(image_ids),
        n_gt=len(all_gts),
        n_detections=n_detections,
    )


def report_csv(run: str, report: MetricsReport, train_images: int) -> str:
    """Result row shaped like the summary table: run,mAP,mAP50,mAP_small,AR,AR_small,train_images."""
    return (
        "run,mAP,mAP50,mAP_small,AR,AR_small,train_images\n"
        f"{run},{report.map:.6f},{report.map50:.6f},{report.map_small:.6f},"
        f"{report.ar:.6f},{report.ar_small:.6f},{train_images}\n"
    )


# --- agreement --------------------------------------------------------------

def interobserver_iou(
    labels_a: list[Annotation],
    labels_b: list[Annotation],
    cfg: EvalConfig | None = None,
) -> AgreementReport | None:
    """Mean/std IoU over one-to-one matched same-class pairs with IoU above
    the agreement floor. Returns None when nothing matches."""
    cfg = cfg or EvalConfig()
    groups_a: dict[tuple[int, int], list[Annotation]] = {}
    groups_b: dict[tuple[int, int], list[Annotation]] = {}
    for a in labels_a:
        groups_a.setdefault((a.image_id, a.class_id), []).append(a)
    for b in labels_b:
        groups_b.setdefault((b.image_id, b.class_id), []).append(b)

    matched_ious: list[float] = []
    for key in sorted(set(groups_a) & set(groups_b)):
        ga, gb = groups_a[key], groups_b[key]
        ious = iou_matrix(
            np.stack([x.box.as_array() for x in ga]), np.stack([x.box.as_array() for x in gb])
        )
        pairs = [
            (ious[i, j], i, j)
            for i in range(len(ga))
            for j in range(len(gb))
            if ious[i, j] > cfg.agreement_iou
        ]
        pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
        used_a: set[int] = set()
        used_b: set[int] = set()
        for v, i, j in pairs:
            if i in used_a or j in used_b:
                continue
            used_a.add(i)
            used_b.add(j)
            matched_ious.append(float(v))
    if not matched_ious:
        return None
    arr = np.array(matched_ious)
    return AgreementReport(
        mean_iou=float(arr.mean()), sigma=_sigma(arr, cfg.sample_sigma), n_pairs=len(arr)
    )


def model_gt_iou(
    gts: list[Annotation],
    dets_by_image: dict[int, list[ScoredBox]],
    cfg: EvalConfig | None = None,
) -> AgreementReport | None:
    """For every GT, the IoU with the maximum-overlap same-class detection in
    its image (0 when none exists); mean/std over all GT."""
    cfg = cfg or EvalConfig()
    if not gts:
        return None
    values = []
    for g in gts:
        candidates = [
            d for d in dets_by_image.get(g.image_id, []) if d.class_id == g.class_id
        ]
        if not candidates:
            values.append(0.0)
            continue
        ious = iou_matrix(
            g.box.as_array()[None], np.stack([d.box.as_array() for d in candidates])
        )[0]
        values.append(float(ious.max()))
    arr = np.array(values)
    return AgreementReport(
        mean_iou=float(arr.mean()), sigma=_sigma(arr, cfg.sample_sigma), n_pairs=len(arr)
    )
