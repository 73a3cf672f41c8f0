"""Image transforms: histogram normalization, crop/resize, flips, Gaussian
blur and noise, and the two-view composition used for contrastive training.

Images are 2-D float64 arrays with intensities in [0,1]. All stochastic
transforms draw from an explicit numpy Generator, so a fixed seed replays
the exact same output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentSpec:
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    blur_kernel: int = 21
    noise_sigma_frac_range: tuple[float, float] = (0.125, 0.25)
    hist_method: str = "equalize"

    def __post_init__(self):
        for lo, hi in (self.crop_scale_range, self.blur_sigma_range, self.noise_sigma_frac_range):
            if not 0.0 < lo <= hi:
                raise ValueError(f"bad range ({lo},{hi})")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob outside [0,1]: {self.flip_prob}")
        if self.blur_kernel % 2 != 1:
            raise ValueError(f"blur kernel must be odd: {self.blur_kernel}")
        if self.hist_method not in ("equalize", "minmax"):
            raise ValueError(f"unknown hist_method {self.hist_method!r}")


def hist_normalize(img: np.ndarray, method: str = "equalize") -> np.ndarray:
    """Histogram equalization on 256 bins (or min-max stretching)."""
    img = np.asarray(img, dtype=np.float64)
    if method == "minmax":
        lo, hi = img.min(), img.max()
        if hi - lo == 0.0:
            return img.copy()
        return (img - lo) / (hi - lo)
    bins = np.minimum((img * 256.0).astype(np.int64), 255)
    hist = np.bincount(bins.ravel(), minlength=256)
    cdf = np.cumsum(hist) / img.size
    return cdf[bins]


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers; identity when sizes match."""
    h, w = img.shape
    sy = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    rows = img[y0, :] * (1.0 - fy) + img[y1, :] * fy
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def crop_resize(img: np.ndarray, y0: int, x0: int, side: int) -> np.ndarray:
    """Crop a square region and resize it back to the input dimensions."""
    h, w = img.shape
    if side < 2:
        raise ValueError(f"crop side must be >= 2: {side}")
    if y0 < 0 or x0 < 0 or y0 + side > h or x0 + side > w:
        raise ValueError(f"crop ({y0},{x0},{side}) outside {img.shape} image")
    return _resize_bilinear(img[y0 : y0 + side, x0 : x0 + side], h, w)


def random_crop_resize(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Square crop with area fraction drawn from crop_scale_range, at a
    uniform position; crops smaller than 2x2 are re-drawn."""
    h, w = img.shape
    short = min(h, w)
    while True:
        frac = rng.uniform(*spec.crop_scale_range)
        side = int(round(np.sqrt(frac) * short))
        if side >= 2:
            break
    side = min(side, short)
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    return crop_resize(img, y0, x0, side)


def flip_image(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def flip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    """Mirror corner-form boxes about the vertical axis: x1' = W - x2."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = boxes.copy()
    out[:, 0] = width - boxes[:, 2]
    out[:, 2] = width - boxes[:, 0]
    return out


def hflip(
    img: np.ndarray,
    boxes: np.ndarray | None = None,
    prob: float = 0.5,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Horizontally flip the image (and boxes) with the given probability."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob outside [0,1]: {prob}")
    if rng is None:
        rng = np.random.default_rng()
    if rng.random() >= prob:
        return img, boxes
    flipped = flip_image(img)
    if boxes is None:
        return flipped, None
    return flipped, flip_boxes(boxes, img.shape[1])


def _gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, kernel: int = 21) -> np.ndarray:
    """Separable Gaussian blur with edge-replication padding."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive: {sigma}")
    if kernel % 2 != 1:
        raise ValueError(f"kernel must be odd: {kernel}")
    h, w = img.shape
    kernel = min(kernel, (min(h, w) - 1) | 1)
    k = _gaussian_kernel(sigma, kernel)
    r = kernel // 2
    pad = np.pad(img, ((0, 0), (r, r)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(pad, kernel, axis=1)
    tmp = win @ k
    pad = np.pad(tmp, ((r, r), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(pad, kernel, axis=0)
    return win @ k


def gaussian_noise(img: np.ndarray, sigma_frac: float, rng: np.random.Generator) -> np.ndarray:
    """Add zero-mean Gaussian noise with sigma scaled by the mean intensity,
    then clamp to [0,1]. An all-black image is returned unchanged."""
    if sigma_frac <= 0.0:
        raise ValueError(f"sigma_frac must be positive: {sigma_frac}")
    sigma = sigma_frac * float(img.mean())
    if sigma == 0.0:
        return img.copy()
    return np.clip(img + rng.normal(0.0, sigma, img.shape), 0.0, 1.0)


def random_view(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view: crop-resize, flip, blur, noise (in that order).

    The input is expected to be histogram-normalized already; ssl_view_pair
    takes care of that.
    """
    out = random_crop_resize(img, spec, rng)
    out, _ = hflip(out, None, spec.flip_prob, rng)
    sigma = rng.uniform(*spec.blur_sigma_range)
    out = gaussian_blur(out, sigma, spec.blur_kernel)
    frac = rng.uniform(*spec.noise_sigma_frac_range)
    return gaussian_noise(out, frac, rng)


def ssl_view_pair(
    img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Two independent stochastic views of the histogram-normalized input."""
    base = hist_normalize(img, spec.hist_method)
    return random_view(base, spec, rng), random_view(base, spec, rng)
