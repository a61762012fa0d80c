"""Seven stochastic training-time transforms, deterministic under seeding.

Every transform maps unit-interval pixels to unit-interval pixels.  The full
pipeline applies, in fixed order: gamma -> crop/resize -> flips -> color
jitter -> grayscale -> blur -> translation, with each probabilistic step
gated by its configured probability.  All randomness comes from a stream
keyed by (global seed, image id, epoch), so concurrent augmentation of
different samples stays reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .image import RasterImage, bilinear_resize, luma

__all__ = [
    "AugmentationConfig",
    "BlurKernel",
    "sample_rng",
    "gamma_correct",
    "random_crop_resize",
    "flip_h",
    "flip_v",
    "color_jitter",
    "to_grayscale",
    "gaussian_blur",
    "translate",
    "augment_sample",
    "AugmentationPipeline",
]


@dataclass(frozen=True)
class AugmentationConfig:
    """Parameter ranges and gate probabilities for the pipeline."""

    gamma_range: tuple[float, float] = (0.7, 1.5)
    crop_scale_range: tuple[float, float] = (0.7, 1.0)
    crop_aspect_range: tuple[float, float] = (0.9, 1.1)
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.2
    brightness_range: tuple[float, float] = (0.8, 1.2)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    saturation_range: tuple[float, float] = (0.8, 1.2)
    hue_range: tuple[float, float] = (-0.05, 0.05)  # fraction of a full turn
    grayscale_prob: float = 0.1
    blur_sigma_range: tuple[float, float] = (0.1, 1.5)
    blur_prob: float = 0.3
    translate_max: tuple[int, int] = (6, 6)  # (dx_max, dy_max) pixels
    target_size: tuple[int, int] = (64, 64)  # (height, width)

    def __post_init__(self):
        for name in (
            "gamma_range",
            "crop_scale_range",
            "crop_aspect_range",
            "brightness_range",
            "contrast_range",
            "saturation_range",
            "hue_range",
            "blur_sigma_range",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: ({lo}, {hi})")
        for name in ("gamma_range", "blur_sigma_range"):
            if getattr(self, name)[0] <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.crop_scale_range[0] and self.crop_scale_range[1] <= 1.0):
            raise ValueError("crop_scale_range must lie in (0, 1]")
        if self.crop_aspect_range[0] <= 0:
            raise ValueError("crop_aspect_range must be positive")
        for name in ("flip_h_prob", "flip_v_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if min(self.translate_max) < 0:
            raise ValueError("translate_max must be nonnegative")
        if min(self.target_size) < 1:
            raise ValueError("target_size must be positive")

    @classmethod
    def disabled(cls, target_size: tuple[int, int]) -> "AugmentationConfig":
        """A configuration under which the pipeline is the identity
        (up to the resize to ``target_size``)."""
        return cls(
            gamma_range=(1.0, 1.0),
            crop_scale_range=(1.0, 1.0),
            crop_aspect_range=(1.0, 1.0),
            flip_h_prob=0.0,
            flip_v_prob=0.0,
            brightness_range=(1.0, 1.0),
            contrast_range=(1.0, 1.0),
            saturation_range=(1.0, 1.0),
            hue_range=(0.0, 0.0),
            grayscale_prob=0.0,
            blur_sigma_range=(0.1, 0.1),
            blur_prob=0.0,
            translate_max=(0, 0),
            target_size=target_size,
        )

    def scaled_translation(self, fraction: float) -> "AugmentationConfig":
        h, w = self.target_size
        return replace(self, translate_max=(int(fraction * w), int(fraction * h)))


@dataclass(frozen=True)
class BlurKernel:
    """Normalized, symmetric (2r+1)^2 Gaussian weights."""

    radius: int
    weights: np.ndarray

    @classmethod
    def from_sigma(cls, sigma: float) -> "BlurKernel":
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        radius = int(np.ceil(3.0 * sigma))
        coords = np.arange(-radius, radius + 1, dtype=np.float64)
        u, v = np.meshgrid(coords, coords, indexing="ij")
        weights = np.exp(-(u**2 + v**2) / (2.0 * sigma**2))
        weights /= weights.sum()
        return cls(radius, weights)


def _id_words(image_id: str) -> list[int]:
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def sample_rng(global_seed: int, image_id: str, epoch: int) -> np.random.Generator:
    """Deterministic, platform-independent stream for one (sample, epoch)."""
    return np.random.default_rng([int(global_seed), int(epoch), *_id_words(image_id)])


# ---------------------------------------------------------------------------
# Individual transforms
# ---------------------------------------------------------------------------


def gamma_correct(img: RasterImage, gamma: float) -> RasterImage:
    """Raise every pixel to the power ``gamma``; 0 and 1 are fixed points."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if gamma == 1.0:
        return img
    return RasterImage(np.power(img.pixels, gamma))


def random_crop_resize(
    img: RasterImage,
    rng: np.random.Generator,
    scale_range: tuple[float, float],
    aspect_range: tuple[float, float],
    target: tuple[int, int],
) -> RasterImage:
    """Crop a random subregion and bilinearly resize it to ``target``.

    The region's area fraction is drawn from ``scale_range`` and its width /
    height ratio from ``aspect_range``; after 10 draws that do not fit inside
    the image, the whole image is used (center-crop fallback).
    """
    h, w = img.height, img.width
    target_h, target_w = target
    top = left = 0
    crop_h, crop_w = h, w
    for _ in range(10):
        area = h * w * rng.uniform(scale_range[0], scale_range[1])
        aspect = rng.uniform(aspect_range[0], aspect_range[1])
        cw = int(round(np.sqrt(area * aspect)))
        ch = int(round(np.sqrt(area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            crop_h, crop_w = ch, cw
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    region = img.pixels[top : top + crop_h, left : left + crop_w]
    if (crop_h, crop_w) == (target_h, target_w):
        return RasterImage(region.copy())
    return RasterImage(np.clip(bilinear_resize(region, target_h, target_w), 0.0, 1.0))


def flip_h(img: RasterImage) -> RasterImage:
    """Reverse column order (mirror left-right)."""
    return RasterImage(img.pixels[:, ::-1].copy())


def flip_v(img: RasterImage) -> RasterImage:
    """Reverse row order (mirror top-bottom)."""
    return RasterImage(img.pixels[::-1].copy())


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    maxc = rgb.max(axis=2)
    minc = rgb.min(axis=2)
    value = maxc
    spread = maxc - minc
    sat = np.where(maxc > 0, spread / np.where(maxc > 0, maxc, 1.0), 0.0)
    r, g, b = rgb[:, :, 0], rgb[:, :, 1], rgb[:, :, 2]
    safe = np.where(spread > 0, spread, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    hue = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    hue = np.where(spread > 0, (hue / 6.0) % 1.0, 0.0)
    return np.stack([hue, sat, value], axis=2)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[:, :, 0], hsv[:, :, 1], hsv[:, :, 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choose = lambda a, b, c, d, e, g: np.choose(i, [a, b, c, d, e, g])
    r = choose(v, q, p, p, t, v)
    g_ = choose(t, v, v, q, p, p)
    b = choose(p, p, t, v, v, q)
    return np.stack([r, g_, b], axis=2)


def _jitter_brightness(px: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return px
    return np.clip(px * factor, 0.0, 1.0)


def _jitter_contrast(px: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return px
    mean = float(luma(px).mean())
    return np.clip(mean + factor * (px - mean), 0.0, 1.0)


def _jitter_saturation(px: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return px
    gray = luma(px)[:, :, None]
    return np.clip(gray + factor * (px - gray), 0.0, 1.0)


def _jitter_hue(px: np.ndarray, shift: float) -> np.ndarray:
    if shift == 0.0:
        return px
    hsv = _rgb_to_hsv(px)
    hsv[:, :, 0] = (hsv[:, :, 0] + shift) % 1.0
    return np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)


def color_jitter(
    img: RasterImage,
    rng: np.random.Generator,
    brightness_range: tuple[float, float] = (0.8, 1.2),
    contrast_range: tuple[float, float] = (0.8, 1.2),
    saturation_range: tuple[float, float] = (0.8, 1.2),
    hue_range: tuple[float, float] = (-0.05, 0.05),
) -> RasterImage:
    """Perturb brightness, contrast, saturation, and hue in a random order.

    Factors are always drawn in a fixed sequence (brightness, contrast,
    saturation, hue) so the stream layout does not depend on the shuffle.
    """
    if img.channels != 3:
        raise ValueError(f"color_jitter needs 3 channels, got {img.channels}")
    b = rng.uniform(*brightness_range)
    c = rng.uniform(*contrast_range)
    s = rng.uniform(*saturation_range)
    hshift = rng.uniform(*hue_range)
    order = rng.permutation(4)
    px = img.pixels
    for op in order:
        if op == 0:
            px = _jitter_brightness(px, b)
        elif op == 1:
            px = _jitter_contrast(px, c)
        elif op == 2:
            px = _jitter_saturation(px, s)
        else:
            px = _jitter_hue(px, hshift)
    return RasterImage(px)


def to_grayscale(img: RasterImage, replicate: bool = False) -> RasterImage:
    """BT.601 luma map; optionally replicated back to 3 channels."""
    if img.channels != 3:
        raise ValueError(f"to_grayscale needs 3 channels, got {img.channels}")
    gray = np.clip(luma(img.pixels), 0.0, 1.0)[:, :, None]
    if replicate:
        gray = np.repeat(gray, 3, axis=2)
    return RasterImage(gray)


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    """Mirror-at-border index map for positions -pad .. n+pad-1."""
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def gaussian_blur(img: RasterImage, sigma: float) -> RasterImage:
    """Convolve each channel with a normalized Gaussian, mirrored borders.

    The kernel radius is ceil(3*sigma); the separable implementation equals
    the full 2-D kernel because the 2-D weights factor exactly.
    """
    kernel = BlurKernel.from_sigma(sigma)
    r = kernel.radius
    if r == 0:
        return img
    coords = np.arange(-r, r + 1, dtype=np.float64)
    axis = np.exp(-(coords**2) / (2.0 * sigma**2))
    axis /= axis.sum()

    px = img.pixels
    rows = _reflect_indices(px.shape[0], r)
    padded = px[rows]
    out = np.zeros_like(px)
    for k in range(2 * r + 1):
        out += axis[k] * padded[k : k + px.shape[0]]
    cols = _reflect_indices(px.shape[1], r)
    padded = out[:, cols]
    out = np.zeros_like(px)
    for k in range(2 * r + 1):
        out += axis[k] * padded[:, k : k + px.shape[1]]
    return RasterImage(np.clip(out, 0.0, 1.0))


def translate(img: RasterImage, dx: int, dy: int) -> RasterImage:
    """Shift by (dx, dy) pixels; uncovered regions are zero-padded."""
    h, w, c = img.pixels.shape
    out = np.zeros_like(img.pixels)
    if abs(dx) < w and abs(dy) < h:
        src_y = slice(max(0, -dy), min(h, h - dy))
        src_x = slice(max(0, -dx), min(w, w - dx))
        dst_y = slice(max(0, dy), min(h, h + dy))
        dst_x = slice(max(0, dx), min(w, w + dx))
        out[dst_y, dst_x] = img.pixels[src_y, src_x]
    return RasterImage(out)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def augment_sample(
    img: RasterImage, config: AugmentationConfig, rng: np.random.Generator
) -> RasterImage:
    """Apply the full pipeline in its fixed order.

    Color-dependent steps (jitter, grayscale) are skipped for single-channel
    inputs.  The output always has ``config.target_size`` spatial extents.
    """
    gamma = rng.uniform(*config.gamma_range)
    img = gamma_correct(img, gamma)
    img = random_crop_resize(
        img, rng, config.crop_scale_range, config.crop_aspect_range, config.target_size
    )
    if rng.random() < config.flip_h_prob:
        img = flip_h(img)
    if rng.random() < config.flip_v_prob:
        img = flip_v(img)
    if img.channels == 3:
        img = color_jitter(
            img,
            rng,
            config.brightness_range,
            config.contrast_range,
            config.saturation_range,
            config.hue_range,
        )
        if rng.random() < config.grayscale_prob:
            img = to_grayscale(img, replicate=True)
    if rng.random() < config.blur_prob:
        sigma = rng.uniform(*config.blur_sigma_range)
        img = gaussian_blur(img, sigma)
    dx_max, dy_max = config.translate_max
    dx = int(rng.integers(-dx_max, dx_max + 1))
    dy = int(rng.integers(-dy_max, dy_max + 1))
    if dx or dy:
        img = translate(img, dx, dy)
    return img


class AugmentationPipeline:
    """Transformer-style wrapper: ``transform`` augments a batch of images.

    Each sample's randomness is keyed by (seed, image id, epoch); image ids
    default to the position index.  Stateless apart from its parameters, so
    ``fit`` is a no-op and the object composes with estimator pipelines.
    """

    def __init__(self, config: AugmentationConfig | None = None, seed: int = 0,
                 epoch: int = 0):
        self.config = config if config is not None else AugmentationConfig()
        self.seed = seed
        self.epoch = epoch

    def get_params(self, deep: bool = True) -> dict:
        return {"config": self.config, "seed": self.seed, "epoch": self.epoch}

    def set_params(self, **params) -> "AugmentationPipeline":
        for key, value in params.items():
            if key not in self.get_params():
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, X=None, y=None) -> "AugmentationPipeline":
        return self

    def transform(self, images, image_ids=None) -> list[RasterImage]:
        images = list(images)
        if image_ids is None:
            image_ids = [str(i) for i in range(len(images))]
        out = []
        for img, image_id in zip(images, image_ids):
            if not isinstance(img, RasterImage):
                img = RasterImage(img)
            rng = sample_rng(self.seed, str(image_id), self.epoch)
            out.append(augment_sample(img, self.config, rng))
        return out
