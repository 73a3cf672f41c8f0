"""Repeat-factor oversampling of images containing rare classes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Annotation, Dataset


@dataclass(frozen=True)
class SamplerConfig:
    threshold: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must be in (0,1]: {self.threshold}")


def class_frequencies(ds: Dataset) -> dict[int, float]:
    """f(c) = fraction of images containing at least one instance of class c.

    Classes absent from the dataset are omitted.
    """
    if ds.n_images == 0:
        raise ValueError("empty dataset")
    counts: dict[int, int] = {}
    for image_id, annos in ds.annotations_by_image().items():
        for c in {a.class_id for a in annos}:
            counts[c] = counts.get(c, 0) + 1
    return {c: n / ds.n_images for c, n in sorted(counts.items())}


def repeat_factor(f_c: float, t: float) -> float:
    """r(c) = max(1, sqrt(t / f(c)))."""
    if f_c <= 0.0:
        raise ValueError(f"class frequency must be positive: {f_c}")
    return max(1.0, math.sqrt(t / f_c))


def image_repeat_factor(annotations: list[Annotation], freqs: dict[int, float], t: float) -> float:
    """r(I) = max over classes present in the image of r(c)."""
    if not annotations:
        raise ValueError("image has no annotations; repeat factor undefined")
    return max(repeat_factor(freqs[a.class_id], t) for a in annotations)


def build_epoch_indices(ds: Dataset, cfg: SamplerConfig, epoch: int = 0) -> list[int]:
    """One epoch's image ids with stochastic-rounded repeat factors, shuffled.

    Each image appears floor(r(I)) times plus one more with probability
    frac(r(I)). Deterministic given (cfg.seed, epoch).
    """
    freqs = class_frequencies(ds)
    by_image = ds.annotations_by_image()
    rng = np.random.default_rng([cfg.seed, epoch])
    out: list[int] = []
    for im in ds.images:
        r = image_repeat_factor(by_image[im.id], freqs, cfg.threshold)
        m = int(math.floor(r))
        if rng.random() < r - m:
            m += 1
        out.extend([im.id] * m)
    rng.shuffle(out)
    return out
