"""Raster images: decoding, encoding, color conversion, bilinear resize.

Pixels are stored as float64 in [0, 1], row-major, channel-interleaved
(H x W x C).  Supported file formats are PNG (via Pillow) and the binary
netpbm formats P6 (PPM, RGB) and P5 (PGM, grayscale) with 8-bit samples.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ImageFormatError",
    "RasterImage",
    "decode_image",
    "decode_image_bytes",
    "encode_image",
    "encode_netpbm",
    "ycbcr_to_rgb",
    "luma",
    "bilinear_resize",
]


class ImageFormatError(ValueError):
    """Raised for unreadable, truncated, or unsupported image files."""


@dataclass(frozen=True)
class RasterImage:
    """H x W x C grid of unit-interval intensities."""

    pixels: np.ndarray  # float64, shape (H, W, C), values in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"RasterImage needs H x W x {{1,3}} pixels, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("RasterImage needs positive height and width")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("RasterImage pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def from_u8(cls, samples: np.ndarray) -> "RasterImage":
        return cls(np.asarray(samples, dtype=np.float64) / 255.0)

    def to_u8(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Decoding / encoding
# ---------------------------------------------------------------------------


def _read_pnm_token(buf: io.BytesIO) -> bytes:
    """Next whitespace-delimited token, skipping '#' comments."""
    token = b""
    while True:
        ch = buf.read(1)
        if ch == b"":
            if token:
                return token
            raise ImageFormatError("truncated netpbm header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = buf.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def decode_image_bytes(blob: bytes, source: str = "<bytes>") -> RasterImage:
    """Decode PNG / P6 / P5 bytes; 8-bit samples map to [0,1] via v/255."""
    if blob[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image, UnidentifiedImageError

        try:
            with Image.open(io.BytesIO(blob)) as im:
                im.load()
                if im.mode in ("L", "I;16", "I"):
                    im = im.convert("L")
                    arr = np.asarray(im, dtype=np.uint8)[:, :, None]
                else:
                    im = im.convert("RGB")
                    arr = np.asarray(im, dtype=np.uint8)
        except (UnidentifiedImageError, OSError, SyntaxError) as exc:
            raise ImageFormatError(f"unreadable PNG file {source}: {exc}") from exc
        return RasterImage.from_u8(arr)

    magic = blob[:2]
    if magic in (b"P6", b"P5"):
        buf = io.BytesIO(blob)
        buf.read(2)
        try:
            width = int(_read_pnm_token(buf))
            height = int(_read_pnm_token(buf))
            maxval = int(_read_pnm_token(buf))
        except ValueError as exc:
            raise ImageFormatError(f"malformed netpbm header in {source}") from exc
        if maxval != 255:
            raise ImageFormatError(
                f"unsupported netpbm maxval {maxval} in {source} (only 8-bit supported)"
            )
        channels = 3 if magic == b"P6" else 1
        expected = width * height * channels
        raw = buf.read(expected)
        if len(raw) != expected:
            raise ImageFormatError(
                f"truncated netpbm payload in {source}: "
                f"expected {expected} bytes, got {len(raw)}"
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)
        return RasterImage.from_u8(arr)

    raise ImageFormatError(f"unsupported image format in {source}")


def decode_image(path: str | Path) -> RasterImage:
    """Load a PNG, PPM (P6), or PGM (P5) file."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read image file {path}: {exc}") from exc
    return decode_image_bytes(blob, source=str(path))


def encode_netpbm(img: RasterImage) -> bytes:
    """Serialize to binary PPM (3 channels) or PGM (1 channel), 8-bit."""
    samples = img.to_u8()
    magic = b"P6" if img.channels == 3 else b"P5"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + samples.tobytes()


def encode_image(img: RasterImage, path: str | Path) -> None:
    """Write an image; format chosen by extension (.png, .ppm, .pgm)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        from PIL import Image

        samples = img.to_u8()
        if img.channels == 1:
            Image.fromarray(samples[:, :, 0], mode="L").save(path)
        else:
            Image.fromarray(samples, mode="RGB").save(path)
        return
    if suffix in (".ppm", ".pgm"):
        expected = ".ppm" if img.channels == 3 else ".pgm"
        if suffix != expected:
            raise ImageFormatError(
                f"{suffix} cannot hold a {img.channels}-channel image (use {expected})"
            )
        path.write_bytes(encode_netpbm(img))
        return
    raise ImageFormatError(f"unsupported output format {suffix!r}")


# ---------------------------------------------------------------------------
# Color conversion
# ---------------------------------------------------------------------------

# Full-range BT.601 (JPEG convention).
_YCBCR_TO_RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)

_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def ycbcr_to_rgb(img: RasterImage) -> RasterImage:
    """Full-range BT.601 YCbCr -> RGB, chroma centered at 0.5, clamped."""
    if img.channels != 3:
        raise ValueError(f"ycbcr_to_rgb needs 3 channels, got {img.channels}")
    ycc = img.pixels.copy()
    ycc[:, :, 1] -= 0.5
    ycc[:, :, 2] -= 0.5
    rgb = ycc @ _YCBCR_TO_RGB.T
    return RasterImage(np.clip(rgb, 0.0, 1.0))


def luma(pixels: np.ndarray) -> np.ndarray:
    """BT.601 luma of an H x W x 3 array, returned as H x W."""
    return pixels @ _LUMA_WEIGHTS


# ---------------------------------------------------------------------------
# Bilinear resize (shared by augmentation and model-input scaling)
# ---------------------------------------------------------------------------

_COEFF_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _axis_coeffs(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gather indices and weights for one axis with half-pixel centers."""
    key = (src, dst)
    cached = _COEFF_CACHE.get(key)
    if cached is not None:
        return cached
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    # Clamp to the valid sample range; edge pixels repeat.
    frac = np.where(lo < 0, 0.0, frac)
    frac = np.where(lo >= src - 1, 0.0, frac)
    lo = np.clip(lo, 0, src - 1)
    hi = np.clip(lo + 1, 0, src - 1)
    result = (lo, hi, frac)
    if len(_COEFF_CACHE) < 4096:
        _COEFF_CACHE[key] = result
    return result


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize H x W x C pixels to out_h x out_w with half-pixel centers."""
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: target extents must be positive")
    src_h, src_w = pixels.shape[:2]
    if (src_h, src_w) == (out_h, out_w):
        # Half-pixel mapping at equal size is the identity.
        return pixels
    ylo, yhi, yfrac = _axis_coeffs(src_h, out_h)
    xlo, xhi, xfrac = _axis_coeffs(src_w, out_w)

    rows_lo = pixels[ylo]
    rows_hi = pixels[yhi]
    yf = yfrac[:, None, None]
    rows = rows_lo * (1.0 - yf) + rows_hi * yf
    cols_lo = rows[:, xlo]
    cols_hi = rows[:, xhi]
    xf = xfrac[None, :, None]
    return cols_lo * (1.0 - xf) + cols_hi * xf


def bilinear_resize_batch(batch: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an N x H x W x C stack in one pass (same weights per image)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: target extents must be positive")
    src_h, src_w = batch.shape[1:3]
    if (src_h, src_w) == (out_h, out_w):
        return batch
    ylo, yhi, yfrac = _axis_coeffs(src_h, out_h)
    xlo, xhi, xfrac = _axis_coeffs(src_w, out_w)

    rows_lo = batch[:, ylo]
    rows_hi = batch[:, yhi]
    yf = yfrac[None, :, None, None]
    rows = rows_lo * (1.0 - yf) + rows_hi * yf
    cols_lo = rows[:, :, xlo]
    cols_hi = rows[:, :, xhi]
    xf = xfrac[None, None, :, None]
    return cols_lo * (1.0 - xf) + cols_hi * xf
