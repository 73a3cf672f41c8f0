"""Single-stage anchor-based detection head over encoder features: anchor
matching, the cross-entropy + L1 training loss, fine-tuning with early
stopping on validation mAP, and inference decoding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import augment, metrics, nn, optim, sampling
from .data import Dataset
from .geometry import Box, ScoredBox, iou_matrix, nms_indices

log = logging.getLogger(__name__)

IGNORE = -1
BACKGROUND = 0


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DetConfig:
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    conf_thresh: float = 0.05
    nms_iou: float = 0.5
    max_dets: int = 100
    anchor_sizes: tuple[float, ...] = (8.0, 16.0, 32.0)
    head_channels: int = 32
    box_loss_weight: float = 1.0
    optimizer: optim.OptimConfig = field(
        default_factory=lambda: optim.OptimConfig(lr=1e-3, momentum=0.9, weight_decay=1e-4)
    )
    batch_size: int = 8
    max_epochs: int = 15
    patience: int = 5
    flip_prob: float = 0.5
    oversample_threshold: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.neg_iou < self.pos_iou <= 1.0:
            raise ValueError(f"need 0 <= neg_iou < pos_iou <= 1: {self.neg_iou}, {self.pos_iou}")
        for v in (self.conf_thresh, self.nms_iou):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"threshold outside [0,1]: {v}")


@dataclass(frozen=True)
class AnchorGrid:
    stride: int
    sizes: tuple[float, ...]
    boxes: np.ndarray  # (A,4) corner form, image coordinates

    def __len__(self) -> int:
        return self.boxes.shape[0]


def build_anchors(input_size: int, stride: int, sizes: tuple[float, ...]) -> AnchorGrid:
    """Square anchors centered on the stride grid, ordered (row, col, size)."""
    cells = input_size // stride
    boxes = np.empty((cells * cells * len(sizes), 4), dtype=np.float64)
    i = 0
    for gy in range(cells):
        cy = (gy + 0.5) * stride
        for gx in range(cells):
            cx = (gx + 0.5) * stride
            for s in sizes:
                boxes[i] = (cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2)
                i += 1
    return AnchorGrid(stride=stride, sizes=tuple(sizes), boxes=boxes)


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Offsets (dcx/wa, dcy/ha, log(w/wa), log(h/ha)) of gt boxes vs anchors."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gcx = (gt[:, 0] + gt[:, 2]) / 2
    gcy = (gt[:, 1] + gt[:, 3]) / 2
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of encode_boxes; zero offsets reproduce the anchors."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    cx = offsets[:, 0] * aw + acx
    cy = offsets[:, 1] * ah + acy
    w = np.exp(offsets[:, 2]) * aw
    h = np.exp(offsets[:, 3]) * ah
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


@dataclass
class DetTargets:
    class_target: np.ndarray  # (A,) int64: -1 ignore, 0 background, >=1 class index
    box_target: np.ndarray  # (A,4), defined where class_target >= 1


def match_anchors(
    anchors: AnchorGrid,
    gt_boxes: np.ndarray,
    gt_class_idx: np.ndarray,
    cfg: DetConfig,
) -> DetTargets:
    """Max-IoU assignment with an ignore band, plus a forced positive for
    each ground-truth box (its single highest-IoU anchor, first index on
    ties; with duplicate ground truths the later one wins the shared anchor).
    """
    a = len(anchors)
    class_target = np.zeros(a, dtype=np.int64)
    box_target = np.zeros((a, 4), dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        return DetTargets(class_target, box_target)
    ious = iou_matrix(anchors.boxes, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(a), best_gt]
    assigned = np.full(a, -1, dtype=np.int64)
    class_target[best_iou >= cfg.neg_iou] = IGNORE
    pos = best_iou >= cfg.pos_iou
    assigned[pos] = best_gt[pos]
    for g in range(gt_boxes.shape[0]):
        a_star = int(ious[:, g].argmax())
        assigned[a_star] = g
    pos_mask = assigned >= 0
    class_target[pos_mask] = gt_class_idx[assigned[pos_mask]]
    box_target[pos_mask] = encode_boxes(
        gt_boxes[assigned[pos_mask]], anchors.boxes[pos_mask]
    )
    return DetTargets(class_target, box_target)


# --- head -------------------------------------------------------------------

def add_head_params(
    store: nn.ParamStore, enc_cfg: nn.EncoderConfig, cfg: DetConfig, n_classes: int,
    rng: np.random.Generator,
) -> None:
    cin = enc_cfg.embed_dim
    ch = cfg.head_channels
    n_sizes = len(cfg.anchor_sizes)
    store.add("head.conv.w", rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (ch, cin, 3, 3)))
    store.add("head.conv.b", np.zeros(ch))
    store.add("head.cls.w", rng.normal(0.0, np.sqrt(2.0 / ch), (n_sizes * (n_classes + 1), ch, 1, 1)))
    store.add("head.cls.b", np.zeros(n_sizes * (n_classes + 1)))
    store.add("head.reg.w", rng.normal(0.0, np.sqrt(2.0 / ch), (n_sizes * 4, ch, 1, 1)))
    store.add("head.reg.b", np.zeros(n_sizes * 4))


def init_detector_params(
    enc_cfg: nn.EncoderConfig, cfg: DetConfig, n_classes: int, seed: int
) -> nn.ParamStore:
    """Backbone + head store (no projection head); pure function of seed."""
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    ci = 1
    for i, co in enumerate(enc_cfg.channels):
        store.add(f"encoder.conv{i + 1}.w", rng.normal(0.0, np.sqrt(2.0 / (ci * enc_cfg.kernel**2)),
                                                       (co, ci, enc_cfg.kernel, enc_cfg.kernel)))
        store.add(f"encoder.conv{i + 1}.b", np.zeros(co))
        ci = co
    add_head_params(store, enc_cfg, cfg, n_classes, rng)
    return store


def head_forward(params: nn.ParamStore, features: np.ndarray, cfg: DetConfig, n_classes: int):
    """(N,C,S,S) features -> per-anchor class logits (N,A,K+1) and offsets (N,A,4)."""
    n, _, s, _ = features.shape
    n_sizes = len(cfg.anchor_sizes)
    h, c_conv = nn.conv2d_forward(features, params["head.conv.w"].value, params["head.conv.b"].value)
    h, c_relu = nn.relu_forward(h)
    cls_map, c_cls = nn.conv2d_forward(h, params["head.cls.w"].value, params["head.cls.b"].value)
    reg_map, c_reg = nn.conv2d_forward(h, params["head.reg.w"].value, params["head.reg.b"].value)
    # channel layout (size, field) -> anchor order (row, col, size)
    cls = cls_map.reshape(n, n_sizes, n_classes + 1, s, s).transpose(0, 3, 4, 1, 2)
    cls = cls.reshape(n, s * s * n_sizes, n_classes + 1)
    reg = reg_map.reshape(n, n_sizes, 4, s, s).transpose(0, 3, 4, 1, 2)
    reg = reg.reshape(n, s * s * n_sizes, 4)
    cache = (c_conv, c_relu, c_cls, c_reg, (n, s, n_sizes, n_classes))
    return cls, reg, cache


def head_backward(params: nn.ParamStore, cache, gcls: np.ndarray, greg: np.ndarray) -> np.ndarray:
    c_conv, c_relu, c_cls, c_reg, (n, s, n_sizes, n_classes) = cache
    gcls_map = gcls.reshape(n, s, s, n_sizes, n_classes + 1).transpose(0, 3, 4, 1, 2)
    gcls_map = gcls_map.reshape(n, n_sizes * (n_classes + 1), s, s)
    greg_map = greg.reshape(n, s, s, n_sizes, 4).transpose(0, 3, 4, 1, 2)
    greg_map = greg_map.reshape(n, n_sizes * 4, s, s)
    gh1, gw, gb = nn.conv2d_backward(c_cls, gcls_map)
    params["head.cls.w"].grad += gw
    params["head.cls.b"].grad += gb
    gh2, gw, gb = nn.conv2d_backward(c_reg, greg_map)
    params["head.reg.w"].grad += gw
    params["head.reg.b"].grad += gb
    gh = nn.relu_backward(c_relu, gh1 + gh2)
    gfeat, gw, gb = nn.conv2d_backward(c_conv, gh)
    params["head.conv.w"].grad += gw
    params["head.conv.b"].grad += gb
    return gfeat


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return logits - m - np.log(e.sum(axis=-1, keepdims=True))


def detection_loss(cls: np.ndarray, reg: np.ndarray, targets: list[DetTargets], cfg: DetConfig):
    """Class term: mean cross-entropy over non-ignored anchors (background is
    class 0). Box term: mean L1 over positive anchors' offsets, 0 without
    positives. Total = class + weight * box. Returns (loss, gcls, greg)."""
    n, a, k1 = cls.shape
    cls_t = np.stack([t.class_target for t in targets])
    box_t = np.stack([t.box_target for t in targets])
    counted = cls_t != IGNORE
    m = int(counted.sum())
    if m == 0:
        raise ValueError("all anchors ignored; cannot form a class loss")
    logp = _log_softmax(cls)
    labels = np.where(counted, cls_t, 0)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    ce = float(-(picked * counted).sum() / m)

    gcls = np.exp(logp)
    onehot = np.zeros_like(gcls)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    gcls = (gcls - onehot) * counted[..., None] / m

    pos = cls_t >= 1
    p = int(pos.sum())
    greg = np.zeros_like(reg)
    if p > 0:
        diff = reg - box_t
        box = float(np.abs(diff[pos]).sum() / (p * 4))
        greg[pos] = np.sign(diff[pos]) * (cfg.box_loss_weight / (p * 4))
    else:
        box = 0.0
    loss = ce + cfg.box_loss_weight * box
    nn._check_finite("detection loss", np.array([loss]))
    return loss, gcls, greg


def decode_predictions(
    cls_row: np.ndarray,
    reg_row: np.ndarray,
    anchors: AnchorGrid,
    class_ids: list[int],
    cfg: DetConfig,
    image_size: int,
) -> list[ScoredBox]:
    """Softmax scores, background dropped, inverse offsets, clip, confidence
    threshold, class-wise NMS, then keep the top max_dets by score."""
    logp = _log_softmax(cls_row)
    scores = np.exp(logp)[:, 1:]  # (A, K)
    boxes = decode_boxes(reg_row, anchors.boxes)
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, image_size)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, image_size)
    anchor_idx, class_idx = np.nonzero(scores >= cfg.conf_thresh)
    if anchor_idx.size == 0:
        return []
    cand_boxes = boxes[anchor_idx]
    valid = (cand_boxes[:, 2] > cand_boxes[:, 0]) & (cand_boxes[:, 3] > cand_boxes[:, 1])
    anchor_idx, class_idx, cand_boxes = anchor_idx[valid], class_idx[valid], cand_boxes[valid]
    if anchor_idx.size == 0:
        return []
    cand_scores = scores[anchor_idx, class_idx]
    keep = nms_indices(cand_boxes, cand_scores, class_idx, cfg.nms_iou)[: cfg.max_dets]
    return [
        ScoredBox(
            box=Box(*cand_boxes[i]),
            class_id=class_ids[class_idx[i]],
            score=float(cand_scores[i]),
        )
        for i in keep
    ]


# --- training and inference -------------------------------------------------

def _class_index_map(ds: Dataset) -> dict[int, int]:
    """category id -> 1-based class index (0 is background)."""
    return {cid: i + 1 for i, cid in enumerate(ds.class_ids())}


def predict_batch(
    params: nn.ParamStore,
    images: np.ndarray,
    anchors: AnchorGrid,
    class_ids: list[int],
    enc_cfg: nn.EncoderConfig,
    cfg: DetConfig,
) -> list[list[ScoredBox]]:
    feat, _ = nn.backbone_forward(params, images, enc_cfg)
    cls, reg, _ = head_forward(params, feat, cfg, len(class_ids))
    return [
        decode_predictions(cls[i], reg[i], anchors, class_ids, cfg, enc_cfg.input_size)
        for i in range(images.shape[0])
    ]


def predict(
    params: nn.ParamStore,
    image: np.ndarray,
    anchors: AnchorGrid,
    class_ids: list[int],
    enc_cfg: nn.EncoderConfig,
    cfg: DetConfig,
) -> list[ScoredBox]:
    """Detections for one image (histogram-normalized internally)."""
    normed = augment.hist_normalize(image)
    return predict_batch(params, normed[None], anchors, class_ids, enc_cfg, cfg)[0]


def predict_dataset(
    params: nn.ParamStore,
    ds: Dataset,
    anchors: AnchorGrid,
    class_ids: list[int],
    enc_cfg: nn.EncoderConfig,
    cfg: DetConfig,
    batch_size: int = 64,
) -> dict[int, list[ScoredBox]]:
    out: dict[int, list[ScoredBox]] = {}
    ids = [im.id for im in ds.images]
    pix = {im.id: augment.hist_normalize(im.pixels) for im in ds.images}
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        batch = np.stack([pix[i] for i in chunk])
        for image_id, dets in zip(chunk, predict_batch(params, batch, anchors, class_ids, enc_cfg, cfg)):
            out[image_id] = dets
    return out


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_map: float


def finetune(
    encoder_init: nn.ParamStore | None,
    train: Dataset,
    val: Dataset,
    enc_cfg: nn.EncoderConfig,
    cfg: DetConfig,
    seed: int = 0,
    eval_cfg: metrics.EvalConfig | None = None,
) -> tuple[nn.ParamStore, list[EpochLog]]:
    """Train the detector on labeled data, early-stopping on validation
    mAP@[.5,.95]; returns the best-validation parameters and the epoch log.

    encoder_init is an SSL checkpoint store (its `encoder.`-prefixed tensors
    are copied in) or None for random initialization.
    """
    if train.n_images == 0 or val.n_images == 0:
        raise ValueError("finetune needs non-empty train and val datasets")
    eval_cfg = eval_cfg or metrics.EvalConfig()
    class_ids = train.class_ids()
    idx_map = _class_index_map(train)
    params = init_detector_params(enc_cfg, cfg, len(class_ids), seed)
    if encoder_init is not None:
        nn.copy_prefixed(params, encoder_init, "encoder.")
    anchors = build_anchors(enc_cfg.input_size, enc_cfg.input_size // enc_cfg.feature_size,
                            cfg.anchor_sizes)

    by_image = train.annotations_by_image()
    pix = {im.id: augment.hist_normalize(im.pixels) for im in train.images}
    gt_arrays = {
        i: (
            np.stack([a.box.as_array() for a in annos]) if annos else np.zeros((0, 4)),
            np.array([idx_map[a.class_id] for a in annos], dtype=np.int64),
        )
        for i, annos in by_image.items()
    }
    sampler = sampling.SamplerConfig(threshold=cfg.oversample_threshold, seed=seed)
    state = optim.OptimState()
    best = params.copy()
    best_map = -1.0
    best_epoch = 0
    logs: list[EpochLog] = []
    val_gts = val.annotations_by_image()

    for epoch in range(1, cfg.max_epochs + 1):
        order = sampling.build_epoch_indices(train, sampler, epoch=epoch)
        flip_rng = np.random.default_rng([seed, epoch, 1])
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            imgs, targets = [], []
            for image_id in chunk:
                img = pix[image_id]
                boxes, classes = gt_arrays[image_id]
                img, boxes = augment.hflip(img, boxes, cfg.flip_prob, flip_rng)
                imgs.append(img)
                targets.append(match_anchors(anchors, boxes, classes, cfg))
            batch = np.stack(imgs)
            try:
                feat, bb_cache = nn.backbone_forward(params, batch, enc_cfg)
                cls, reg, h_cache = head_forward(params, feat, cfg, len(class_ids))
                loss, gcls, greg = detection_loss(cls, reg, targets, cfg)
                gfeat = head_backward(params, h_cache, gcls, greg)
                nn.backbone_backward(params, bb_cache, gfeat)
                optim.sgd_step(params, state, cfg.optimizer)
            except nn.NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch}, step {state.t}: {e}") from e
            losses.append(loss)

        dets = predict_dataset(params, val, anchors, class_ids, enc_cfg, cfg)
        report = metrics.evaluate([im.id for im in val.images], dets, val_gts, eval_cfg)
        logs.append(EpochLog(epoch=epoch, train_loss=float(np.mean(losses)), val_map=report.map))
        if report.map > best_map:
            best_map = report.map
            best_epoch = epoch
            best = params.copy()
        elif epoch - best_epoch >= cfg.patience:
            log.info("early stop at epoch %d (best %.4f at epoch %d)", epoch, best_map, best_epoch)
            break
    return best, logs


def write_training_log(logs: list[EpochLog], path) -> None:
    with open(path, "w") as f:
        f.write("epoch,train_loss,val_map\n")
        for e in logs:
            f.write(f"{e.epoch},{e.train_loss:.6f},{e.val_map:.6f}\n")
