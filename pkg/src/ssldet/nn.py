"""Minimal float64 differentiable compute: conv/pool/dense layers with
analytic backward passes, named parameter stores, a small conv encoder with
a projection head, and a binary checkpoint format.

Layout convention: image batches are (N, C, H, W); feature vectors (N, D).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"SSLDET01"


class ShapeError(ValueError):
    pass


class NonFiniteError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")
    return arr


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


class ParamStore:
    """Ordered map name -> (value, gradient); names are unique."""

    def __init__(self) -> None:
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            q = out.add(name, p.value.copy())
            q.grad = p.grad.copy()
        return out


def copy_prefixed(dst: ParamStore, src: ParamStore, prefix: str = "encoder.") -> list[str]:
    """Copy src values whose names start with prefix into dst; the rest of
    dst keeps its (fresh) initialization. Shapes must match."""
    copied = []
    for name, p in src.items():
        if not name.startswith(prefix):
            continue
        if name not in dst:
            raise CheckpointError(f"checkpoint name {name!r} not present in target store")
        if dst[name].value.shape != p.value.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: {p.value.shape} vs {dst[name].value.shape}"
            )
        dst[name].value[...] = p.value
        copied.append(name)
    return copied


# --- layers -----------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N, H, W, C*kh*kw) patch matrix (H = Hp-kh+1)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    n, c, h, w = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h, w, c * kh * kw)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 same-padded 2-D convolution (cross-correlation).

    x: (N,Ci,H,W), w: (Co,Ci,kh,kw) with odd kernel dims, b: (Co,).
    """
    n, ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if ci != ci_w:
        raise ShapeError(f"conv2d: input has {ci} channels, kernel expects {ci_w}")
    if kh % 2 != 1 or kw % 2 != 1:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {(kh, kw)}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    col = _im2col(xp, kh, kw).reshape(n * h * wd, ci * kh * kw)
    y = col @ w.reshape(co, -1).T + b
    y = y.reshape(n, h, wd, co).transpose(0, 3, 1, 2)
    _check_finite("conv2d output", y)
    cache = (col, x.shape, w)
    return y, cache


def conv2d_backward(cache, gy: np.ndarray):
    col, x_shape, w = cache
    n, ci, h, wd = x_shape
    co, _, kh, kw = w.shape
    gy_m = gy.transpose(0, 2, 3, 1).reshape(n * h * wd, co)
    gw = (gy_m.T @ col).reshape(co, ci, kh, kw)
    gb = gy_m.sum(axis=0)
    # grad wrt input: full correlation of gy with the flipped kernel
    ph, pw = kh // 2, kw // 2
    gyp = np.pad(gy, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    col_g = _im2col(gyp, kh, kw).reshape(n * h * wd, co * kh * kw)
    wf = np.flip(w, axis=(2, 3)).transpose(0, 2, 3, 1).reshape(co * kh * kw, ci)
    gx = (col_g @ wf).reshape(n, h, wd, ci).transpose(0, 3, 1, 2)
    return gx, gw, gb


def relu_forward(x: np.ndarray):
    y = np.maximum(x, 0.0)
    return y, (x > 0.0)


def relu_backward(cache, gy: np.ndarray) -> np.ndarray:
    return gy * cache


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling with stride 2; H and W must be even. Ties go to the
    first position in (top-left, top-right, bottom-left, bottom-right) order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {(h, w)}")
    x6 = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )
    am = x6.argmax(axis=-1)
    y = np.take_along_axis(x6, am[..., None], axis=-1)[..., 0]
    return y, (am, x.shape)


def maxpool2_backward(cache, gy: np.ndarray) -> np.ndarray:
    am, x_shape = cache
    n, c, h, w = x_shape
    g6 = np.zeros((n, c, h // 2, w // 2, 4), dtype=np.float64)
    np.put_along_axis(g6, am[..., None], gy[..., None], axis=-1)
    return g6.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def global_avg_pool_forward(x: np.ndarray):
    n, c, h, w = x.shape
    return x.mean(axis=(2, 3)), (h, w)


def global_avg_pool_backward(cache, gy: np.ndarray) -> np.ndarray:
    h, w = cache
    return np.broadcast_to(gy[:, :, None, None] / (h * w), gy.shape + (h, w)).copy()


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input dim {x.shape[1]} vs weight dim {w.shape[0]}")
    y = x @ w + b
    _check_finite("dense output", y)
    return y, (x, w)


def dense_backward(cache, gy: np.ndarray):
    x, w = cache
    return gy @ w.T, x.T @ gy, gy.sum(axis=0)


def l2_normalize_forward(x: np.ndarray):
    """Row-wise L2 normalization; rows of x must be nonzero in practice (the
    tiny floor only guards against an exact-zero division)."""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, 1e-300)
    z = x / norms
    return z, (z, norms)


def l2_normalize_backward(cache, gz: np.ndarray) -> np.ndarray:
    z, norms = cache
    return (gz - z * (gz * z).sum(axis=1, keepdims=True)) / norms


# --- encoder ----------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 64
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    proj_hidden: int = 32
    proj_out: int = 16

    def __post_init__(self):
        if self.input_size % (2 ** len(self.channels)) != 0:
            raise ValueError(
                f"input size {self.input_size} not divisible by "
                f"2^{len(self.channels)} downsampling"
            )
        if any(c < 1 for c in self.channels) or self.proj_hidden < 1 or self.proj_out < 1:
            raise ValueError("channel and projection dims must be positive")
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel must be odd: {self.kernel}")

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]

    @property
    def feature_size(self) -> int:
        return self.input_size // (2 ** len(self.channels))


def _he_conv(rng: np.random.Generator, co: int, ci: int, k: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (ci * k * k)), (co, ci, k, k))


def _he_dense(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, d_out))


def add_encoder_params(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    ci = 1
    for i, co in enumerate(cfg.channels):
        store.add(f"encoder.conv{i + 1}.w", _he_conv(rng, co, ci, cfg.kernel))
        store.add(f"encoder.conv{i + 1}.b", np.zeros(co))
        ci = co
    store.add("proj.fc1.w", _he_dense(rng, cfg.embed_dim, cfg.proj_hidden))
    store.add("proj.fc1.b", np.zeros(cfg.proj_hidden))
    store.add("proj.fc2.w", _he_dense(rng, cfg.proj_hidden, cfg.proj_out))
    store.add("proj.fc2.b", np.zeros(cfg.proj_out))


def init_encoder_params(cfg: EncoderConfig, seed: int) -> ParamStore:
    store = ParamStore()
    add_encoder_params(store, cfg, np.random.default_rng(seed))
    return store


def backbone_forward(params: ParamStore, images: np.ndarray, cfg: EncoderConfig):
    """Conv stages only: (N,H,W) images -> stride-2^k feature map."""
    if images.ndim != 3 or images.shape[1] != cfg.input_size or images.shape[2] != cfg.input_size:
        raise ShapeError(f"expected (N,{cfg.input_size},{cfg.input_size}) images, got {images.shape}")
    x = images[:, None, :, :].astype(np.float64)
    caches = []
    for i in range(len(cfg.channels)):
        w, b = params[f"encoder.conv{i + 1}.w"].value, params[f"encoder.conv{i + 1}.b"].value
        x, c_conv = conv2d_forward(x, w, b)
        x, c_relu = relu_forward(x)
        x, c_pool = maxpool2_forward(x)
        caches.append((c_conv, c_relu, c_pool))
    return x, caches


def backbone_backward(params: ParamStore, caches, gfeat: np.ndarray) -> None:
    g = gfeat
    for i in reversed(range(len(caches))):
        c_conv, c_relu, c_pool = caches[i]
        g = maxpool2_backward(c_pool, g)
        g = relu_backward(c_relu, g)
        g, gw, gb = conv2d_backward(c_conv, g)
        params[f"encoder.conv{i + 1}.w"].grad += gw
        params[f"encoder.conv{i + 1}.b"].grad += gb


def encoder_forward(params: ParamStore, images: np.ndarray, cfg: EncoderConfig):
    """Full encoder: returns (features, unit-norm embeddings, cache)."""
    feat, bb_caches = backbone_forward(params, images, cfg)
    pooled, c_gap = global_avg_pool_forward(feat)
    h1, c_fc1 = dense_forward(pooled, params["proj.fc1.w"].value, params["proj.fc1.b"].value)
    a1, c_r1 = relu_forward(h1)
    h2, c_fc2 = dense_forward(a1, params["proj.fc2.w"].value, params["proj.fc2.b"].value)
    z, c_norm = l2_normalize_forward(h2)
    cache = (bb_caches, c_gap, c_fc1, c_r1, c_fc2, c_norm)
    return feat, z, cache


def encoder_backward(params: ParamStore, cache, gz: np.ndarray) -> None:
    """Accumulate gradients from the embedding side into the store."""
    bb_caches, c_gap, c_fc1, c_r1, c_fc2, c_norm = cache
    g = l2_normalize_backward(c_norm, gz)
    g, gw, gb = dense_backward(c_fc2, g)
    params["proj.fc2.w"].grad += gw
    params["proj.fc2.b"].grad += gb
    g = relu_backward(c_r1, g)
    g, gw, gb = dense_backward(c_fc1, g)
    params["proj.fc1.w"].grad += gw
    params["proj.fc1.b"].grad += gb
    g = global_avg_pool_backward(c_gap, g)
    backbone_backward(params, bb_caches, g)


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(params: ParamStore, path) -> None:
    """Binary format: magic, entry count, then per entry name/rank/dims and a
    little-endian float64 payload; trailed by a CRC-32 of the entries block."""
    body = bytearray()
    for name, p in params.items():
        nb = name.encode("utf-8")
        body += struct.pack("<Q", len(nb)) + nb
        body += struct.pack("<Q", p.value.ndim)
        for d in p.value.shape:
            body += struct.pack("<Q", d)
        body += np.ascontiguousarray(p.value, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(params)))
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(bytes(body))))


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic string")
    pos = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw) - 4:
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = raw[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<Q", take(8))
    body_start = pos
    store = ParamStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n_items = int(np.prod(dims)) if dims else 1
        payload = take(8 * n_items)
        value = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        store.add(name, value)
    (crc_stored,) = struct.unpack("<I", raw[-4:])
    if pos != len(raw) - 4:
        raise CheckpointError(f"{path}: trailing garbage in checkpoint")
    if zlib.crc32(raw[body_start:pos]) != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch")
    return store
