"""
Randomized test-time augmentation.

One augmentation runs, in order: the five color transforms in a sampled
order, edge padding, one affine warp (rotation, translation, scale about
the image center), Gaussian blur, center crop, horizontal flip, and
additive white noise. Transforms whose sampled parameter is exactly the
identity value are skipped, so an identity draw returns the input bits.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .config import BLUR_SIGMA_MIN, TtaConfig
from .seeding import derive_rng

COLOR_TRANSFORMS = ("brightness", "contrast", "saturation", "hue", "gamma")
GRAY_WEIGHTS = np.array([0.2989, 0.587, 0.114])


@dataclass(frozen=True)
class TtaParams:
    angle: float = 0.0  # degrees
    shift: Tuple[int, int] = (0, 0)  # (dx columns, dy rows)
    scale: float = 1.0
    flip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    gamma: float = 1.0
    blur_sigma: float = BLUR_SIGMA_MIN
    noise_sigma: float = 0.0
    color_order: Tuple[str, ...] = COLOR_TRANSFORMS
    noise_seed: int = 0

    @property
    def affine_is_identity(self) -> bool:
        return self.angle == 0.0 and tuple(self.shift) == (0, 0) and self.scale == 1.0


def sample_params(cfg: TtaConfig, rng: np.random.Generator) -> TtaParams:
    """Draw one parameter set. Draw order is fixed so a stream always yields the same params."""
    angle = float(rng.uniform(*cfg.rotation))
    dx, dy = (int(v) for v in rng.integers(-cfg.translation, cfg.translation + 1, size=2))
    scale = float(rng.uniform(*cfg.scale))
    flip = bool(rng.random() < cfg.flip_prob) and cfg.mirror_enabled
    brightness = float(rng.uniform(*cfg.brightness))
    contrast = float(rng.uniform(*cfg.contrast))
    saturation = float(rng.uniform(*cfg.saturation))
    hue = float(rng.uniform(*cfg.hue))
    gamma = float(rng.uniform(*cfg.gamma))
    blur_sigma = float(rng.uniform(BLUR_SIGMA_MIN, cfg.blur_sigma_max))
    noise_sigma = float(rng.uniform(0.0, cfg.noise_sigma_max))
    order = tuple(COLOR_TRANSFORMS[i] for i in rng.permutation(len(COLOR_TRANSFORMS)))
    noise_seed = int(rng.integers(0, 2 ** 63))
    return TtaParams(angle, (dx, dy), scale, flip, brightness, contrast, saturation, hue, gamma,
                     blur_sigma, noise_sigma, order, noise_seed)


# --------- color ----------

def grayscale(img: np.ndarray) -> np.ndarray:
    """x_G = 0.2989 R + 0.587 G + 0.114 B, shape (H, W)."""
    return np.tensordot(np.asarray(img, dtype=np.float64), GRAY_WEIGHTS, axes=([-1], [0]))


def _brightness(x: np.ndarray, b: float) -> np.ndarray:
    return b * x


def _contrast(x: np.ndarray, c: float) -> np.ndarray:
    return c * x + (1.0 - c) * grayscale(x).mean()


def _saturation(x: np.ndarray, sat: float) -> np.ndarray:
    return sat * x + (1.0 - sat) * grayscale(x)[..., None]


def _hue(x: np.ndarray, h: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(x, 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + h, 1.0)
    return hsv_to_rgb(hsv)


def _gamma(x: np.ndarray, g: float) -> np.ndarray:
    return np.power(x, g)


_COLOR_OPS = {
    "brightness": (_brightness, 1.0),
    "contrast": (_contrast, 1.0),
    "saturation": (_saturation, 1.0),
    "hue": (_hue, 0.0),
    "gamma": (_gamma, 1.0),
}


def apply_color(img: np.ndarray, params: TtaParams) -> np.ndarray:
    out = np.asarray(img, dtype=np.float32)
    for name in params.color_order:
        op, identity = _COLOR_OPS[name]
        value = getattr(params, name)
        if value == identity:
            continue
        out = np.clip(op(out.astype(np.float64), value), 0.0, 1.0).astype(np.float32)
    return out


# --------- geometry ----------

def _pad_amounts(size: int, target: int) -> Tuple[int, int]:
    extra = max(0, target - size)
    return extra // 2, extra - extra // 2


def _pad(img: np.ndarray, pad_to: Optional[int]) -> Tuple[np.ndarray, Tuple[int, int]]:
    h, w = img.shape[:2]
    top, bottom = _pad_amounts(h, pad_to or 2 * h)
    left, right = _pad_amounts(w, pad_to or 2 * w)
    return np.pad(img, ((top, bottom), (left, right), (0, 0)), mode="edge"), (top, left)


def _warp(padded: np.ndarray, params: TtaParams) -> np.ndarray:
    """Bilinear affine warp about the padded center, sampled through the inverse map."""
    theta = math.radians(params.angle)
    cos, sin = math.cos(theta), math.sin(theta)
    # (row, col) coordinates; forward map p_out = c + s R (p_in - c) + t
    inverse = np.array([[cos, sin], [-sin, cos]]) / params.scale
    center = (np.array(padded.shape[:2], dtype=np.float64) - 1.0) / 2.0
    shift = np.array([params.shift[1], params.shift[0]], dtype=np.float64)
    offset = center - inverse @ (center + shift)
    out = np.empty_like(padded)
    for ch in range(padded.shape[2]):
        out[..., ch] = ndimage.affine_transform(padded[..., ch], inverse, offset=offset, order=1, mode="nearest")
    return out


def apply_affine(img: np.ndarray, params: TtaParams, pad_to: Optional[int] = None) -> np.ndarray:
    """Pad, warp, center-crop, then flip horizontally when ``params.flip``."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]
    out = img
    if not params.affine_is_identity:
        padded, (top, left) = _pad(img, pad_to)
        out = _warp(padded, params)[top:top + h, left:left + w]
    if params.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out, dtype=np.float32)


# --------- blur and noise ----------

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Discretized 2D Gaussian on [-r, r]^2 with r = max(1, ceil(3 sigma)), normalized to sum 1."""
    radius = max(1, math.ceil(3.0 * sigma))
    grid = np.arange(-radius, radius + 1, dtype=np.float64)
    u, v = np.meshgrid(grid, grid, indexing="ij")
    kernel = np.exp(-(u * u + v * v) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def apply_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    kernel = gaussian_kernel(sigma)
    r = kernel.shape[0] // 2
    off_center = kernel.copy()
    off_center[r, r] = 0.0
    if not off_center.any():
        return img.copy()
    out = ndimage.convolve(img.astype(np.float64), kernel[:, :, None], mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if sigma == 0.0:
        return img.copy()
    noisy = img.astype(np.float64) + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


# --------- pipeline ----------

def apply_tta(img: np.ndarray, params: TtaParams, pad_to: Optional[int] = None) -> np.ndarray:
    """colors -> pad -> affine -> blur -> crop -> flip -> noise; output in [0, 1], input shape."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]
    out = apply_color(img, params)
    padded, (top, left) = _pad(out, pad_to)
    if not params.affine_is_identity:
        padded = _warp(padded, params)
    padded = apply_blur(padded, params.blur_sigma)
    out = padded[top:top + h, left:left + w]
    if params.flip:
        out = out[:, ::-1]
    out = apply_noise(np.ascontiguousarray(out), params.noise_sigma, np.random.default_rng(params.noise_seed))
    return np.clip(out, 0.0, 1.0)


def _root_seed(rng: Union[int, np.random.Generator]) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2 ** 63))
    return int(rng)


def generate_ttas(img: np.ndarray, cfg: TtaConfig, rng: Union[int, np.random.Generator],
                  n: Optional[int] = None, workers: int = 1) -> np.ndarray:
    """
    ``n`` (default ``cfg.n``) augmentations of one image, shape (n, H, W, C).

    Augmentation ``i`` draws from its own stream ``(seed, i)``, so the batch is
    the same for any ``workers`` count and its first k rows equal the batch
    generated with ``n=k``.
    """
    img = np.asarray(img, dtype=np.float32)
    n = cfg.n if n is None else n
    seed = _root_seed(rng)

    def one(i: int) -> np.ndarray:
        return apply_tta(img, sample_params(cfg, derive_rng(seed, i)), pad_to=cfg.pad_to)

    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batch = list(pool.map(one, range(n)))
    else:
        batch = [one(i) for i in range(n)]
    return np.stack(batch).astype(np.float32, copy=False)
