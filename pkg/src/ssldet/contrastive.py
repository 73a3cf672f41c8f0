"""NT-Xent contrastive loss and the self-supervised pretraining loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import augment, nn, optim
from .data import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SSLConfig:
    temperature: float = 0.5
    batch_pairs: int = 32
    epochs: int = 30
    optimizer: optim.OptimConfig = field(
        default_factory=lambda: optim.OptimConfig(lr=1e-3, momentum=0.9, weight_decay=5e-4)
    )
    augment: augment.AugmentSpec = field(default_factory=augment.AugmentSpec)
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive: {self.temperature}")
        if self.batch_pairs < 2:
            raise ValueError(f"need at least 2 pairs per batch: {self.batch_pairs}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0: {self.epochs}")


def paired_indices(n_pairs: int) -> np.ndarray:
    """Partner map for the interleaved layout [a0, b0, a1, b1, ...]."""
    partner = np.arange(2 * n_pairs)
    partner[0::2] += 1
    partner[1::2] -= 1
    return partner


def ntxent_loss(z: np.ndarray, partner: np.ndarray, temperature: float):
    """Normalized-temperature cross-entropy over 2N paired embeddings.

    z rows are unit vectors; similarity is their dot product over the
    temperature. Each row i contributes -log softmax_{k != i}(sim(i,k)) at
    its partner; the loss is the mean over all 2N rows. Returns the scalar
    loss and its gradient with respect to z.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive: {temperature}")
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[0]
    partner = np.asarray(partner)
    if m < 2 or m % 2 != 0:
        raise ValueError(f"need an even number (>= 2) of embeddings, got {m}")
    if sorted(partner.tolist()) != list(range(m)) or (partner[partner] != np.arange(m)).any():
        raise ValueError("partner map must be a perfect matching")

    sims = (z @ z.T) / temperature
    np.fill_diagonal(sims, -np.inf)
    row_max = sims.max(axis=1, keepdims=True)
    exps = np.exp(sims - row_max)
    denom = exps.sum(axis=1, keepdims=True)
    log_denom = np.log(denom[:, 0]) + row_max[:, 0]
    pos = sims[np.arange(m), partner]
    loss = float(np.mean(log_denom - pos))
    nn._check_finite("ntxent loss", np.array([loss]))

    softmax = exps / denom  # diagonal is exactly 0
    softmax[np.arange(m), partner] -= 1.0
    dsims = softmax / m
    gz = (dsims + dsims.T) @ z / temperature
    return loss, gz


def uniform_similarity_loss(n_pairs: int) -> float:
    """Loss value when every pairwise similarity is equal: log(2N - 1).

    Serves as the untrained-embedding reference level.
    """
    return math.log(2 * n_pairs - 1)


def pretrain(
    params: nn.ParamStore,
    unlabeled: Dataset,
    cfg: SSLConfig,
    enc_cfg: nn.EncoderConfig,
) -> tuple[nn.ParamStore, list[float]]:
    """Contrastive pretraining over an unlabeled dataset.

    Per epoch: shuffle images, build two augmented views per image, push the
    interleaved view batch through the encoder and step SGD under a
    per-step cosine schedule. Returns the trained store and per-epoch mean
    losses. Deterministic given cfg.seed.
    """
    if unlabeled.n_images == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    n_pairs = cfg.batch_pairs
    if n_pairs > unlabeled.n_images:
        log.warning(
            "batch of %d pairs larger than dataset (%d images); clamping",
            n_pairs, unlabeled.n_images,
        )
        n_pairs = unlabeled.n_images
    if n_pairs < 2:
        raise ValueError("need at least 2 images per contrastive batch")

    normalized = {}
    for im in unlabeled.images:
        if im.pixels is None:
            raise ValueError(f"image {im.id} has no pixel data")
        normalized[im.id] = augment.hist_normalize(im.pixels, cfg.augment.hist_method)

    image_ids = [im.id for im in unlabeled.images]
    batches_per_epoch = _count_batches(len(image_ids), n_pairs)
    total_steps = cfg.epochs * batches_per_epoch
    state = optim.OptimState(total_steps=total_steps)
    history: list[float] = []

    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(image_ids))
        losses = []
        for start in range(0, len(order), n_pairs):
            chunk = order[start : start + n_pairs]
            if len(chunk) < 2:
                continue
            views = []
            for idx in chunk:
                image_id = image_ids[idx]
                rng = np.random.default_rng([cfg.seed, epoch, image_id])
                v1 = augment.random_view(normalized[image_id], cfg.augment, rng)
                v2 = augment.random_view(normalized[image_id], cfg.augment, rng)
                views.extend((v1, v2))
            batch = np.stack(views)
            try:
                _, z, cache = nn.encoder_forward(params, batch, enc_cfg)
                loss, gz = ntxent_loss(z, paired_indices(len(chunk)), cfg.temperature)
                nn.encoder_backward(params, cache, gz)
                lr = optim.cosine_lr(state.t, total_steps, cfg.optimizer.lr, cfg.optimizer.eta_min)
                optim.sgd_step(params, state, cfg.optimizer, lr=lr)
            except nn.NonFiniteError as e:
                raise nn.NonFiniteError(
                    f"pretraining diverged at epoch {epoch + 1}, step {state.t}: {e}"
                ) from e
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return params, history


def _count_batches(n_images: int, n_pairs: int) -> int:
    full, rem = divmod(n_images, n_pairs)
    return full + (1 if rem >= 2 else 0)


def write_loss_csv(history: list[float], path) -> None:
    with open(path, "w") as f:
        f.write("epoch,loss\n")
        for i, v in enumerate(history):
            f.write(f"{i + 1},{v:.6f}\n")
