"""INI experiment configuration: one file, flag overrides win over file values.

Every key has a documented default (see configs/default.ini); unknown keys
are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from . import contrastive, detect, metrics, nn
from .augment import AugmentSpec
from .data import SplitSpec, SynthConfig
from .experiment import DataConfig, ExperimentConfig, derive_seed
from .optim import OptimConfig


class ConfigError(Exception):
    pass


_KNOWN_KEYS = {
    "experiment": {
        "seed", "outdir", "fractions", "scratch_ablation", "record_timing", "workers",
    },
    "data": {"source", "annotations", "image_dir", "fuse_iou"},
    "synth": {
        "n_images", "image_size", "n_classes", "class_weights", "shapes", "size_ranges",
        "objects_min", "objects_max", "noise_level", "n_raters", "rater_jitter", "seed",
    },
    "split": {"train", "val", "test", "seed"},
    "encoder": {"input_size", "channels", "kernel", "proj_hidden", "proj_out"},
    "ssl": {
        "temperature", "batch_pairs", "epochs", "lr", "momentum", "weight_decay", "eta_min",
    },
    "augment": {
        "crop_min", "crop_max", "flip_prob", "blur_sigma_min", "blur_sigma_max",
        "blur_kernel", "noise_frac_min", "noise_frac_max", "hist_method",
    },
    "detect": {
        "pos_iou", "neg_iou", "conf_thresh", "nms_iou", "max_dets", "anchor_sizes",
        "head_channels", "box_loss_weight", "lr", "momentum", "weight_decay",
        "batch_size", "max_epochs", "patience", "flip_prob", "oversample_threshold",
    },
    "eval": {"small_area", "agreement_iou", "sample_sigma"},
}


class _Section:
    def __init__(self, cp: configparser.ConfigParser, name: str):
        self._cp = cp
        self._name = name

    def _get(self, key: str, conv, default):
        if not self._cp.has_option(self._name, key):
            return default
        raw = self._cp.get(self._name, key)
        try:
            return conv(raw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"[{self._name}] {key} = {raw!r}: {e}") from e

    def str(self, key, default):
        return self._get(key, str, default)

    def int(self, key, default):
        return self._get(key, int, default)

    def float(self, key, default):
        return self._get(key, float, default)

    def bool(self, key, default):
        return self._get(key, _parse_bool, default)

    def floats(self, key, default):
        return self._get(key, lambda s: tuple(float(v) for v in s.split(",")), default)


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ranges(s: str) -> tuple[tuple[int, int], ...]:
    out = []
    for part in s.split(","):
        lo, _, hi = part.strip().partition("-")
        out.append((int(lo), int(hi)))
    return tuple(out)


def apply_overrides(cp: configparser.ConfigParser, overrides: list[str]) -> None:
    """Apply `section.key=value` strings on top of the file contents."""
    for item in overrides:
        target, _, value = item.partition("=")
        section, _, key = target.partition(".")
        if not section or not key or not _:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section.strip(), key.strip(), value.strip())


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
    apply_overrides(cp, overrides or [])

    for section in cp.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp.options(section):
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    try:
        return _build(cp)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def _build(cp: configparser.ConfigParser) -> ExperimentConfig:
    exp = _Section(cp, "experiment")
    seed = exp.int("seed", 7)

    synth_s = _Section(cp, "synth")
    defaults = SynthConfig()
    n_classes = synth_s.int("n_classes", defaults.n_classes)
    synth = SynthConfig(
        n_images=synth_s.int("n_images", defaults.n_images),
        image_size=synth_s.int("image_size", defaults.image_size),
        n_classes=n_classes,
        class_weights=synth_s.floats("class_weights", defaults.class_weights),
        shapes=tuple(
            synth_s._get("shapes", lambda s: [v.strip() for v in s.split(",")], list(defaults.shapes))
        ),
        size_ranges=synth_s._get("size_ranges", _parse_ranges, defaults.size_ranges),
        objects_per_image=(
            synth_s.int("objects_min", defaults.objects_per_image[0]),
            synth_s.int("objects_max", defaults.objects_per_image[1]),
        ),
        noise_level=synth_s.float("noise_level", defaults.noise_level),
        n_raters=synth_s.int("n_raters", defaults.n_raters),
        rater_jitter=synth_s.float("rater_jitter", defaults.rater_jitter),
        seed=synth_s.int("seed", derive_seed(seed, "synth")),
    )

    data_s = _Section(cp, "data")
    data = DataConfig(
        source=data_s.str("source", "synthetic"),
        annotations=data_s.str("annotations", None),
        image_dir=data_s.str("image_dir", None),
        fuse_iou=data_s.float("fuse_iou", 0.2),
        synth=synth,
    )

    split_s = _Section(cp, "split")
    split = SplitSpec(
        train_frac=split_s.float("train", 0.70),
        val_frac=split_s.float("val", 0.10),
        test_frac=split_s.float("test", 0.20),
        seed=split_s.int("seed", derive_seed(seed, "split")),
    )

    enc_s = _Section(cp, "encoder")
    enc_defaults = nn.EncoderConfig()
    encoder = nn.EncoderConfig(
        input_size=enc_s.int("input_size", enc_defaults.input_size),
        channels=tuple(int(c) for c in enc_s.floats("channels", enc_defaults.channels)),
        kernel=enc_s.int("kernel", enc_defaults.kernel),
        proj_hidden=enc_s.int("proj_hidden", enc_defaults.proj_hidden),
        proj_out=enc_s.int("proj_out", enc_defaults.proj_out),
    )

    aug_s = _Section(cp, "augment")
    aug_defaults = AugmentSpec()
    aug = AugmentSpec(
        crop_scale_range=(
            aug_s.float("crop_min", aug_defaults.crop_scale_range[0]),
            aug_s.float("crop_max", aug_defaults.crop_scale_range[1]),
        ),
        flip_prob=aug_s.float("flip_prob", aug_defaults.flip_prob),
        blur_sigma_range=(
            aug_s.float("blur_sigma_min", aug_defaults.blur_sigma_range[0]),
            aug_s.float("blur_sigma_max", aug_defaults.blur_sigma_range[1]),
        ),
        blur_kernel=aug_s.int("blur_kernel", aug_defaults.blur_kernel),
        noise_sigma_frac_range=(
            aug_s.float("noise_frac_min", aug_defaults.noise_sigma_frac_range[0]),
            aug_s.float("noise_frac_max", aug_defaults.noise_sigma_frac_range[1]),
        ),
        hist_method=aug_s.str("hist_method", aug_defaults.hist_method),
    )

    ssl_s = _Section(cp, "ssl")
    ssl = contrastive.SSLConfig(
        temperature=ssl_s.float("temperature", 0.5),
        batch_pairs=ssl_s.int("batch_pairs", 32),
        epochs=ssl_s.int("epochs", 30),
        optimizer=OptimConfig(
            lr=ssl_s.float("lr", 1e-3),
            momentum=ssl_s.float("momentum", 0.9),
            weight_decay=ssl_s.float("weight_decay", 5e-4),
            eta_min=ssl_s.float("eta_min", 0.0),
        ),
        augment=aug,
    )

    det_s = _Section(cp, "detect")
    det_defaults = detect.DetConfig()
    det = detect.DetConfig(
        pos_iou=det_s.float("pos_iou", det_defaults.pos_iou),
        neg_iou=det_s.float("neg_iou", det_defaults.neg_iou),
        conf_thresh=det_s.float("conf_thresh", det_defaults.conf_thresh),
        nms_iou=det_s.float("nms_iou", det_defaults.nms_iou),
        max_dets=det_s.int("max_dets", det_defaults.max_dets),
        anchor_sizes=det_s.floats("anchor_sizes", det_defaults.anchor_sizes),
        head_channels=det_s.int("head_channels", det_defaults.head_channels),
        box_loss_weight=det_s.float("box_loss_weight", det_defaults.box_loss_weight),
        optimizer=OptimConfig(
            lr=det_s.float("lr", 1e-3),
            momentum=det_s.float("momentum", 0.9),
            weight_decay=det_s.float("weight_decay", 1e-4),
        ),
        batch_size=det_s.int("batch_size", det_defaults.batch_size),
        max_epochs=det_s.int("max_epochs", det_defaults.max_epochs),
        patience=det_s.int("patience", det_defaults.patience),
        flip_prob=det_s.float("flip_prob", det_defaults.flip_prob),
        oversample_threshold=det_s.float("oversample_threshold", det_defaults.oversample_threshold),
    )

    eval_s = _Section(cp, "eval")
    eval_cfg = metrics.EvalConfig(
        small_area=eval_s.float("small_area", 1024.0),
        agreement_iou=eval_s.float("agreement_iou", 0.2),
        sample_sigma=eval_s.bool("sample_sigma", False),
    )

    return ExperimentConfig(
        seed=seed,
        outdir=exp.str("outdir", "runs/exp"),
        fractions=exp.floats("fractions", tuple(round(0.1 * i, 1) for i in range(1, 10))),
        scratch_ablation=exp.bool("scratch_ablation", False),
        record_timing=exp.bool("record_timing", False),
        workers=exp.int("workers", 1),
        data=data,
        split=split,
        encoder=encoder,
        ssl=ssl,
        det=det,
        eval=eval_cfg,
    )
