"""Dataset model, JSON/PGM IO, deterministic splits, rater fusion and the
synthetic shape benchmark that stands in for a real radiograph corpus."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Box, iou


class DataError(Exception):
    """Malformed annotation files, missing images, degenerate boxes."""


@dataclass
class ImageInfo:
    id: int
    file: str
    width: int
    height: int
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    class_id: int
    box: Box
    rater_id: str | None = None


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass
class Dataset:
    images: list[ImageInfo]
    annotations: list[Annotation]
    categories: list[Category]

    def __post_init__(self):
        ids = [im.id for im in self.images]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate image ids")
        known = set(ids)
        for a in self.annotations:
            if a.image_id not in known:
                raise DataError(f"annotation {a.id} references unknown image {a.image_id}")

    @property
    def n_images(self) -> int:
        return len(self.images)

    def image(self, image_id: int) -> ImageInfo:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def annotations_by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            out[a.image_id].append(a)
        return out

    def class_ids(self) -> list[int]:
        return sorted(c.id for c in self.categories)


def datasets_equal(a: Dataset, b: Dataset, include_pixels: bool = True) -> bool:
    """Value equality including (optionally) pixel content."""
    if [
        (im.id, im.file, im.width, im.height) for im in a.images
    ] != [(im.id, im.file, im.width, im.height) for im in b.images]:
        return False
    if a.annotations != b.annotations or a.categories != b.categories:
        return False
    if include_pixels:
        for ia, ib in zip(a.images, b.images):
            if (ia.pixels is None) != (ib.pixels is None):
                return False
            if ia.pixels is not None and not np.array_equal(ia.pixels, ib.pixels):
                return False
    return True


# --- splits -----------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.70
    val_frac: float = 0.10
    test_frac: float = 0.20
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise ValueError(f"split fractions must be positive: {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1: {fracs}")


@dataclass(frozen=True)
class LabelBudget:
    pretrain_frac: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.pretrain_frac < 1.0:
            raise ValueError(f"pretrain_frac must be in (0,1): {self.pretrain_frac}")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _subset(ds: Dataset, positions: np.ndarray) -> Dataset:
    positions = np.sort(positions)
    images = [ds.images[i] for i in positions]
    keep = {im.id for im in images}
    annos = [a for a in ds.annotations if a.image_id in keep]
    return Dataset(images=images, annotations=annos, categories=list(ds.categories))


def split_dataset(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Image-level train/val/test partition, deterministic given the seed.

    Val and test sizes are round-half-up(frac * N); train takes the remainder.
    """
    n = ds.n_images
    n_val = round_half_up(spec.val_frac * n)
    n_test = round_half_up(spec.test_frac * n)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"dataset of {n} images too small for split {spec}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    train = _subset(ds, perm[:n_train])
    val = _subset(ds, perm[n_train : n_train + n_val])
    test = _subset(ds, perm[n_train + n_val :])
    return train, val, test


def partition_label_budget(train: Dataset, budget: LabelBudget) -> tuple[Dataset, Dataset]:
    """Split the train set into an unlabeled pretraining side and a labeled
    fine-tuning side. The pretraining side has its annotations removed.

    The pretraining size is round-half-up(frac * N), which reproduces the
    labeled counts 2767 (frac 0.1) and 307 (frac 0.9) on a 3075-image train
    split.
    """
    n = train.n_images
    n_pre = round_half_up(budget.pretrain_frac * n)
    if n_pre < 1 or n_pre >= n:
        raise DataError(f"budget {budget.pretrain_frac} leaves an empty side for {n} images")
    perm = np.random.default_rng(budget.seed).permutation(n)
    pretrain = _subset(train, perm[:n_pre])
    pretrain.annotations = []
    finetune = _subset(train, perm[n_pre:])
    return pretrain, finetune


# --- rater fusion -----------------------------------------------------------

def fuse_rater_boxes(annotations: list[Annotation], iou_thresh: float = 0.2) -> list[Annotation]:
    """Average overlapping same-class boxes from multiple raters into one box.

    Boxes of one class are clustered by single-linkage: two boxes share a
    cluster if a chain of pairwise IoU > iou_thresh connects them. Each
    cluster is replaced by the unweighted mean of member corners. Output is
    sorted by (class_id, x1, y1) and renumbered from 1; rater ids are cleared.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0,1): {iou_thresh}")
    if not annotations:
        return []
    image_ids = {a.image_id for a in annotations}
    if len(image_ids) != 1:
        raise DataError(f"fuse_rater_boxes got annotations from images {sorted(image_ids)}")
    image_id = annotations[0].image_id

    fused: list[Annotation] = []
    by_class: dict[int, list[Annotation]] = {}
    for a in annotations:
        by_class.setdefault(a.class_id, []).append(a)
    for class_id in sorted(by_class):
        group = by_class[class_id]
        parent = list(range(len(group)))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                if iou(group[i].box, group[j].box) > iou_thresh:
                    parent[find(i)] = find(j)
        clusters: dict[int, list[Box]] = {}
        for i, a in enumerate(group):
            clusters.setdefault(find(i), []).append(a.box)
        for members in clusters.values():
            corners = np.mean([b.as_array() for b in members], axis=0)
            fused.append(
                Annotation(
                    id=0,
                    image_id=image_id,
                    class_id=class_id,
                    box=Box(*corners),
                )
            )
    fused.sort(key=lambda a: (a.class_id, a.box.x1, a.box.y1))
    return [replace(a, id=i + 1) for i, a in enumerate(fused)]


def fuse_dataset(ds: Dataset, iou_thresh: float = 0.2) -> Dataset:
    """Apply per-image rater fusion across a dataset, renumbering annotations."""
    by_image = ds.annotations_by_image()
    fused: list[Annotation] = []
    next_id = 1
    for im in ds.images:
        for a in fuse_rater_boxes(by_image[im.id], iou_thresh):
            fused.append(replace(a, id=next_id))
            next_id += 1
    return Dataset(images=list(ds.images), annotations=fused, categories=list(ds.categories))


# --- synthetic benchmark ----------------------------------------------------

SHAPE_KINDS = ("disc", "ring", "bar", "cross", "square")


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 2000
    image_size: int = 64
    n_classes: int = 4
    class_weights: tuple[float, ...] = (8.0, 4.0, 2.0, 1.0)
    shapes: tuple[str, ...] = ("disc", "ring", "bar", "cross")
    size_ranges: tuple[tuple[int, int], ...] = ((12, 40), (10, 34), (8, 28), (6, 22))
    objects_per_image: tuple[int, int] = (1, 3)
    noise_level: float = 0.08
    n_raters: int = 0
    rater_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if len(self.class_weights) != self.n_classes or any(w <= 0 for w in self.class_weights):
            raise ValueError(f"need {self.n_classes} positive class weights")
        if len(self.shapes) != self.n_classes or len(self.size_ranges) != self.n_classes:
            raise ValueError("shapes and size_ranges must have one entry per class")
        for kind in self.shapes:
            if kind not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind {kind!r}")
        for lo, hi in self.size_ranges:
            if not 3 <= lo <= hi:
                raise ValueError(f"bad size range ({lo},{hi})")
            if hi + 2 > self.image_size:
                raise ValueError(f"object size {hi} does not fit a {self.image_size}px image")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"bad objects_per_image ({lo},{hi})")
        if self.n_raters == 1:
            raise ValueError("n_raters must be 0 (plain labels) or >= 2")


def _shape_stamp(kind: str, size: int) -> np.ndarray:
    """Boolean mask of the primitive; every border row/column of the stamp
    touches at least one foreground pixel, so the stamp bounds are tight."""
    s = size
    if kind == "square":
        return np.ones((s, s), dtype=bool)
    if kind == "bar":
        h = max(3, round(s / 3))
        return np.ones((h, s), dtype=bool)
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    if kind == "disc":
        return r2 <= c**2 + 1e-9
    if kind == "ring":
        inner = max(1.0, c / 2.0)
        return (r2 <= c**2 + 1e-9) & (r2 >= inner**2)
    if kind == "cross":
        t = max(3, round(s / 4))
        lo = int(math.floor(c - t / 2.0 + 0.5))
        hi = lo + t
        mask = np.zeros((s, s), dtype=bool)
        mask[lo:hi, :] = True
        mask[:, lo:hi] = True
        return mask
    raise ValueError(f"unknown shape kind {kind!r}")


def _boxes_overlap(b: tuple[int, int, int, int], others: list[tuple[int, int, int, int]]) -> bool:
    x1, y1, x2, y2 = b
    for ox1, oy1, ox2, oy2 in others:
        if x1 < ox2 and ox1 < x2 and y1 < oy2 and oy1 < y2:
            return True
    return False


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Generate a deterministic shape-detection benchmark.

    Images are noisy grayscale backgrounds with 1..k non-overlapping
    class-specific primitives, each annotated with a tight box. Object class
    is sampled proportionally to class_weights. With n_raters >= 2 every true
    box is replaced by per-rater copies whose corners carry zero-mean jitter.
    """
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    probs = weights / weights.sum()

    images: list[ImageInfo] = []
    annotations: list[Annotation] = []
    next_anno = 1
    for i in range(cfg.n_images):
        image_id = i + 1
        img = np.clip(rng.normal(0.2, cfg.noise_level, (size, size)), 0.0, 1.0)
        n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
        placed: list[tuple[int, int, int, int]] = []
        true_boxes: list[tuple[int, Box]] = []
        for _ in range(n_obj):
            cls = int(rng.choice(cfg.n_classes, p=probs))
            lo, hi = cfg.size_ranges[cls]
            s = int(rng.integers(lo, hi + 1))
            stamp = _shape_stamp(cfg.shapes[cls], s)
            sh, sw = stamp.shape
            if sh + 2 > size or sw + 2 > size:
                raise DataError(f"object of size {s} does not fit a {size}px image")
            for _ in range(30):
                x0 = int(rng.integers(1, size - sw))
                y0 = int(rng.integers(1, size - sh))
                candidate = (x0, y0, x0 + sw, y0 + sh)
                if not _boxes_overlap(candidate, placed):
                    level = rng.uniform(0.55, 0.95)
                    img[y0 : y0 + sh, x0 : x0 + sw][stamp] = level
                    placed.append(candidate)
                    true_boxes.append((cls + 1, Box(*map(float, candidate))))
                    break
            # crowded image: silently place fewer objects
        if not true_boxes:
            # first placement attempt always succeeds on an empty image, so
            # this can only trip if the rng was exhausted by rejects
            raise DataError(f"could not place any object in image {image_id}")

        pixels = np.round(img * 255.0) / 255.0
        images.append(
            ImageInfo(id=image_id, file=f"img_{image_id:05d}.pgm", width=size, height=size, pixels=pixels)
        )
        for class_id, box in true_boxes:
            if cfg.n_raters >= 2:
                for r in range(cfg.n_raters):
                    jit = rng.normal(0.0, cfg.rater_jitter, 4) if cfg.rater_jitter > 0 else np.zeros(4)
                    x1 = min(max(box.x1 + jit[0], 0.0), size - 1.0)
                    y1 = min(max(box.y1 + jit[1], 0.0), size - 1.0)
                    x2 = min(max(box.x2 + jit[2], x1 + 1.0), float(size))
                    y2 = min(max(box.y2 + jit[3], y1 + 1.0), float(size))
                    annotations.append(
                        Annotation(
                            id=next_anno,
                            image_id=image_id,
                            class_id=class_id,
                            box=Box(x1, y1, x2, y2),
                            rater_id=f"R{r + 1}",
                        )
                    )
                    next_anno += 1
            else:
                annotations.append(
                    Annotation(id=next_anno, image_id=image_id, class_id=class_id, box=box)
                )
                next_anno += 1

    categories = [Category(id=c + 1, name=f"{cfg.shapes[c]}") for c in range(cfg.n_classes)]
    return Dataset(images=images, annotations=annotations, categories=categories)


# --- PGM and JSON IO --------------------------------------------------------

def write_pgm(path: Path | str, pixels: np.ndarray) -> None:
    """8-bit binary PGM (P5); intensities in [0,1] are scaled by 255."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"expected 2-D image, got shape {arr.shape}")
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: Path | str) -> np.ndarray:
    """Read a binary PGM into float intensities in [0,1] (divide by maxval)."""
    with open(path, "rb") as f:
        raw = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4 and pos < len(raw):
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if len(fields) < 4 or fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise DataError(f"{path}: bad PGM header") from e
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pos += 1  # single whitespace after maxval
    body = raw[pos : pos + w * h]
    if len(body) != w * h:
        raise DataError(f"{path}: truncated PGM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def save_dataset(ds: Dataset, outdir: Path | str) -> Path:
    """Write annotations.json plus an images/ directory of PGM files."""
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    for im in ds.images:
        if im.pixels is None:
            raise DataError(f"image {im.id} has no pixel data to save")
        write_pgm(outdir / "images" / im.file, im.pixels)
    doc = {
        "images": [
            {"id": im.id, "file": im.file, "width": im.width, "height": im.height}
            for im in ds.images
        ],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "category_id": a.class_id,
                "bbox": list(a.box.to_xywh()),
                **({"rater_id": a.rater_id} if a.rater_id is not None else {}),
            }
            for a in ds.annotations
        ],
        "categories": [{"id": c.id, "name": c.name} for c in ds.categories],
    }
    path = outdir / "annotations.json"
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
    return path


def load_dataset(annotation_file: Path | str, image_dir: Path | str | None = None) -> Dataset:
    """Load a dataset from its annotation JSON; boxes are clipped to image
    bounds, and images are read eagerly when image_dir is given."""
    annotation_file = Path(annotation_file)
    try:
        with open(annotation_file) as f:
            doc = json.load(f)
    except OSError as e:
        raise DataError(f"cannot read {annotation_file}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{annotation_file}: invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise DataError(f"{annotation_file}: top level must be an object")

    images: list[ImageInfo] = []
    for i, rec in enumerate(doc.get("images", [])):
        try:
            info = ImageInfo(
                id=int(rec["id"]), file=str(rec["file"]),
                width=int(rec["width"]), height=int(rec["height"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"images[{i}]: {e!r}") from e
        if image_dir is not None:
            p = Path(image_dir) / info.file
            if not p.exists():
                raise DataError(f"images[{i}]: missing image file {p}")
            info.pixels = read_pgm(p)
            if info.pixels.shape != (info.height, info.width):
                raise DataError(
                    f"images[{i}]: file is {info.pixels.shape}, header says "
                    f"{(info.height, info.width)}"
                )
        images.append(info)
    dims = {im.id: (im.width, im.height) for im in images}

    annotations: list[Annotation] = []
    for i, rec in enumerate(doc.get("annotations", [])):
        try:
            image_id = int(rec["image_id"])
            x, y, w, h = (float(v) for v in rec["bbox"])
            anno_id = int(rec["id"])
            class_id = int(rec["category_id"])
            rater = rec.get("rater_id")
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"annotations[{i}]: {e!r}") from e
        if image_id not in dims:
            raise DataError(f"annotations[{i}]: unknown image_id {image_id}")
        iw, ih = dims[image_id]
        x1 = min(max(x, 0.0), float(iw))
        y1 = min(max(y, 0.0), float(ih))
        x2 = min(max(x + w, 0.0), float(iw))
        y2 = min(max(y + h, 0.0), float(ih))
        if not (x2 > x1 and y2 > y1):
            raise DataError(f"annotations[{i}]: degenerate box after clipping: {rec['bbox']}")
        annotations.append(
            Annotation(
                id=anno_id, image_id=image_id, class_id=class_id,
                box=Box(x1, y1, x2, y2),
                rater_id=str(rater) if rater is not None else None,
            )
        )

    categories: list[Category] = []
    for i, rec in enumerate(doc.get("categories", [])):
        try:
            categories.append(Category(id=int(rec["id"]), name=str(rec["name"])))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"categories[{i}]: {e!r}") from e

    return Dataset(images=images, annotations=annotations, categories=categories)
