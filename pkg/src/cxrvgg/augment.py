"""Image decoding, resizing, channel statistics and random training transforms.

Images are float64 ``[H, W, 3]`` arrays with values in ``[0, 1]``.
:func:`random_transform` applies, in this order: independent horizontal and
vertical flips (each with probability 1/2), one affine warp, an additive
per-channel shift, then clips to ``[0, 1]``.

The affine warp maps a source point ``p`` (relative to the image centre) to
``R @ S @ Z @ (p + t)``: shift ``t`` first, then isotropic zoom ``Z``, shear
``S`` and rotation ``R``. Positive angles turn the picture counter-clockwise
as displayed (row axis pointing down). Output pixels are sampled bilinearly
from the inverse map and pixels that fall outside the source take the fill
value.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, DomainError, InputError
from .tensor import DTYPE, Rng

IMAGE_SIZE = 182


def decode_image(path) -> np.ndarray:
    """Read an image file as ``[H, W, 3]`` float64 in ``[0, 1]``; grayscale is replicated."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                arr = np.asarray(im, dtype=DTYPE)
                top = 65535.0 if im.mode.startswith("I") else max(float(arr.max()), 1.0)
                arr = np.clip(arr / top, 0.0, 1.0)
                arr = np.repeat(arr[..., None], 3, axis=2)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=DTYPE) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise InputError(path, f"cannot decode image ({exc})") from None
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InputError(path, "image has no pixels")
    return arr


def _linear_weights(n_in: int, n_out: int):
    """Source indices and weights for 1-D linear resampling with half-pixel centres."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize(img, size: int | Sequence[int] = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resample of ``[H, W]`` or ``[H, W, C]`` to ``size x size`` (or ``(h, w)``), 3 channels out."""
    img = np.asarray(img, dtype=DTYPE)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3) or min(img.shape[:2]) < 1:
        raise DomainError(f"resize expects [H, W] or [H, W, 1|3], got {img.shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    oh, ow = (size, size) if np.isscalar(size) else size
    h, w, _ = img.shape
    if (h, w) == (oh, ow):
        return img.copy()
    y0, y1, wy = _linear_weights(h, oh)
    x0, x1, wx = _linear_weights(w, ow)
    rows = img[y0] * (1 - wy)[:, None, None] + img[y1] * wy[:, None, None]
    return rows[:, x0] * (1 - wx)[None, :, None] + rows[:, x1] * wx[None, :, None]


def load_image(path, size: int = IMAGE_SIZE) -> np.ndarray:
    return resize(decode_image(path), size)


# --------------------------------------------------------------------------
# feature-wise standardisation

@dataclass(frozen=True)
class ChannelStats:
    mean: tuple
    std: tuple

    def to_arrays(self):
        return np.asarray(self.mean, dtype=DTYPE), np.asarray(self.std, dtype=DTYPE)


def fit_stats(images: Iterable[np.ndarray]) -> ChannelStats:
    """Per-channel mean and population std over every pixel of every image (two passes)."""
    images = list(images)
    if not images:
        raise DomainError("cannot fit channel statistics on an empty set")
    total = np.zeros(images[0].shape[-1], dtype=DTYPE)
    count = 0
    for img in images:
        flat = np.asarray(img, dtype=DTYPE).reshape(-1, img.shape[-1])
        total += flat.sum(axis=0)
        count += flat.shape[0]
    mean = total / count
    sq = np.zeros_like(mean)
    for img in images:
        flat = np.asarray(img, dtype=DTYPE).reshape(-1, img.shape[-1])
        sq += np.square(flat - mean).sum(axis=0)
    std = np.sqrt(sq / count)
    if np.any(std <= 1e-12):
        bad = [int(c) for c in np.flatnonzero(std <= 1e-12)]
        raise DegenerateInputError(f"zero variance in channel(s) {bad}")
    return ChannelStats(tuple(float(m) for m in mean), tuple(float(s) for s in std))


def standardize(img, stats: ChannelStats) -> np.ndarray:
    mean, std = stats.to_arrays()
    return (np.asarray(img, dtype=DTYPE) - mean) / std


def destandardize(img, stats: ChannelStats) -> np.ndarray:
    mean, std = stats.to_arrays()
    return np.asarray(img, dtype=DTYPE) * std + mean


# --------------------------------------------------------------------------
# random transforms

@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 50.0
    width_shift_frac: float = 0.20
    height_shift_frac: float = 0.20
    shear_deg_ccw: float = 0.25
    zoom_frac: float = 0.10
    channel_shift: float = 0.20
    hflip: bool = True
    vflip: bool = True
    fill: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("width_shift_frac", "height_shift_frac", "zoom_frac", "channel_shift"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}")
        if not 0.0 <= self.rotation_deg <= 180.0:
            raise ConfigError(f"rotation_deg must lie in [0, 180], got {self.rotation_deg}")
        if not 0.0 <= self.shear_deg_ccw < 90.0:
            raise ConfigError(f"shear_deg_ccw must lie in [0, 90), got {self.shear_deg_ccw}")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, False, False, 0.0, seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}

    def with_seed(self, seed: int) -> "AugmentConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class TransformParams:
    hflip: bool
    vflip: bool
    rotation_deg: float
    shear_deg: float
    zoom: float
    shift_x_frac: float
    shift_y_frac: float
    channel_offsets: tuple


def sample_params(cfg: AugmentConfig, rng: Rng, channels: int = 3) -> TransformParams:
    """Draw one parameter set. Every draw is taken even when its range is zero."""
    u = rng.random(2)
    rot = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    shear = rng.uniform(0.0, cfg.shear_deg_ccw)
    zoom = rng.uniform(1.0 - cfg.zoom_frac, 1.0 + cfg.zoom_frac)
    sx = rng.uniform(-cfg.width_shift_frac, cfg.width_shift_frac)
    sy = rng.uniform(-cfg.height_shift_frac, cfg.height_shift_frac)
    offsets = rng.uniform(-cfg.channel_shift, cfg.channel_shift, size=channels)
    return TransformParams(
        hflip=bool(cfg.hflip and u[0] < 0.5),
        vflip=bool(cfg.vflip and u[1] < 0.5),
        rotation_deg=float(rot),
        shear_deg=float(shear),
        zoom=float(zoom),
        shift_x_frac=float(sx),
        shift_y_frac=float(sy),
        channel_offsets=tuple(float(o) for o in offsets),
    )


def affine_matrix(params: TransformParams) -> np.ndarray:
    """Forward 2x2 linear part ``R @ S @ Z`` acting on ``(x, y)`` with ``y`` pointing down."""
    a = math.radians(params.rotation_deg)
    rot = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
    shear = np.array([[1.0, math.tan(math.radians(params.shear_deg))], [0.0, 1.0]])
    zoom = np.eye(2) * params.zoom
    return rot @ shear @ zoom


def bilinear_sample(img, src_y, src_x, fill: float = 0.0) -> np.ndarray:
    """Sample ``img`` at fractional ``(src_y, src_x)``; the frame outside the image reads ``fill``."""
    h, w, c = img.shape
    padded = np.full((h + 2, w + 2, c), fill, dtype=DTYPE)
    padded[1:-1, 1:-1] = img
    py = np.asarray(src_y, dtype=DTYPE) + 1.0
    px = np.asarray(src_x, dtype=DTYPE) + 1.0
    outside = (py < 0) | (py > h + 1) | (px < 0) | (px > w + 1)
    py = np.clip(py, 0.0, h + 1.0)
    px = np.clip(px, 0.0, w + 1.0)
    y0 = np.minimum(np.floor(py).astype(int), h)
    x0 = np.minimum(np.floor(px).astype(int), w)
    wy = (py - y0)[..., None]
    wx = (px - x0)[..., None]
    out = ((1 - wy) * (1 - wx) * padded[y0, x0] + (1 - wy) * wx * padded[y0, x0 + 1]
           + wy * (1 - wx) * padded[y0 + 1, x0] + wy * wx * padded[y0 + 1, x0 + 1])
    out[outside] = fill
    return out


def warp(img, params: TransformParams, fill: float = 0.0) -> np.ndarray:
    h, w, _ = img.shape
    fwd = affine_matrix(params)
    shift = np.array([params.shift_x_frac * w, params.shift_y_frac * h])
    if np.array_equal(fwd, np.eye(2)) and not shift.any():
        return img.copy()
    inv = np.linalg.inv(fwd)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=DTYPE) - cy, np.arange(w, dtype=DTYPE) - cx, indexing="ij")
    src_x = inv[0, 0] * xx + inv[0, 1] * yy - shift[0] + cx
    src_y = inv[1, 0] * xx + inv[1, 1] * yy - shift[1] + cy
    return bilinear_sample(img, src_y, src_x, fill)


def apply_transform(img, params: TransformParams, fill: float = 0.0, clip=(0.0, 1.0)) -> np.ndarray:
    out = np.asarray(img, dtype=DTYPE)
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1]
    out = warp(np.ascontiguousarray(out), params, fill)
    out = out + np.asarray(params.channel_offsets, dtype=DTYPE)
    if clip is not None:
        out = np.clip(out, *clip)
    return out


def random_transform(img, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """Draw parameters from ``cfg`` with ``rng`` and apply them to ``img``."""
    img = np.asarray(img, dtype=DTYPE)
    params = sample_params(cfg, rng, img.shape[-1])
    return apply_transform(img, params, cfg.fill)


def save_png(path, img) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(Path(path))
