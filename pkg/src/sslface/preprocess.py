"""Deterministic image normalization.

Crop/resize, RGB -> Y + CrCb split (BT.601 full range, chroma offset 128),
and histogram equalization of the luminance plane. Everything here is a pure
function: identical input gives bit-identical output, so planes computed on
different machines agree exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

# BT.601 full-range luma weights; chroma rows scaled so Cb/Cr peak at +/-0.5
# before the 128 offset.
_YCBCR_FWD = np.array(
    [
        [0.299, 0.587, 0.114],  # Y
        [0.5, -0.418688, -0.081312],  # Cr
        [-0.168736, -0.331264, 0.5],  # Cb
    ]
)

SUPPORTED_FORMATS = ("PNG", "PPM")  # Pillow reports binary PGM/PPM as "PPM"


def read_image(path: str | Path) -> np.ndarray:
    """Read a PNG or binary PPM/PGM file as an RGB uint8 array (H, W, 3).

    Grayscale files are replicated across the three channels. Anything that is
    not PNG or binary PPM/PGM is rejected.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in SUPPORTED_FORMATS:
                raise DataError(f"{path}: unsupported format {im.format!r} (PNG/PPM/PGM only)")
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except UnidentifiedImageError:
        raise DataError(f"{path}: not a decodable image") from None
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"{path}: empty or malformed image")
    return arr


def decode_image_bytes(blob: bytes) -> np.ndarray:
    """Decode in-memory PNG or binary PPM/PGM bytes to RGB uint8 (H, W, 3)."""
    import io

    try:
        with Image.open(io.BytesIO(blob)) as im:
            if im.format not in SUPPORTED_FORMATS:
                raise DataError(f"unsupported upload format {im.format!r} (PNG/PPM/PGM only)")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError:
        raise DataError("upload is not a decodable image") from None
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError("empty or malformed uploaded image")
    return arr


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Write a 2-D uint8 array as a binary PGM file."""
    arr = np.asarray(gray)
    if arr.ndim != 2:
        raise DataError("write_pgm expects a 2-D grayscale array")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(Path(path), format="PPM")


def center_crop_square(img: np.ndarray) -> np.ndarray:
    """Center-crop an (H, W, C) image to its shorter side."""
    h, w = img.shape[:2]
    side = min(h, w)
    r0 = (h - side) // 2
    c0 = (w - side) // 2
    return img[r0 : r0 + side, c0 : c0 + side]


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) uint8 image.

    Uses half-pixel-center sampling: source coordinate of destination pixel x
    is (x + 0.5) * in/out - 0.5, clamped to the valid range. When the target
    equals the source dimensions this is an exact identity.
    """
    if out_w < 1 or out_h < 1:
        raise DataError("target dimensions must be >= 1")
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w = arr.shape[:2]
    if h < 1 or w < 1:
        raise DataError("empty input image")

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    r_lo, r_hi, r_f = axis_coords(h, out_h)
    c_lo, c_hi, c_f = axis_coords(w, out_w)
    top = arr[r_lo][:, c_lo] * (1 - c_f)[None, :, None] + arr[r_lo][:, c_hi] * c_f[None, :, None]
    bot = arr[r_hi][:, c_lo] * (1 - c_f)[None, :, None] + arr[r_hi][:, c_hi] * c_f[None, :, None]
    out = top * (1 - r_f)[:, None, None] + bot * r_f[:, None, None]
    out = np.floor(out + 0.5)  # round half up, matching the hand oracle
    out = np.clip(out, 0, 255).astype(np.uint8)
    return out[:, :, 0] if squeeze else out


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    """Mirror an (H, W, ...) image left-right: pixel (r, c) <-> (r, W-1-c)."""
    return np.ascontiguousarray(img[:, ::-1])


def to_ycbcr(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split an RGB uint8 image into a Y plane and a (Cr, Cb) plane pair.

    BT.601 full range; chroma neutral at 128, clamped to [0, 255]. Returns
    float arrays of shape (H, W, 1) and (H, W, 2); channel 0 of the second
    array is Cr.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError("to_ycbcr expects an (H, W, 3) RGB image")
    ycrcb = arr @ _YCBCR_FWD.T
    ycrcb[:, :, 1:] += 128.0
    ycrcb = np.clip(ycrcb, 0.0, 255.0)
    return ycrcb[:, :, :1], ycrcb[:, :, 1:]


def from_ycbcr(y: np.ndarray, crcb: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_ycbcr`; returns RGB uint8. Used for round-trip checks."""
    yv = np.asarray(y, dtype=np.float64)[:, :, 0]
    cr = np.asarray(crcb, dtype=np.float64)[:, :, 0] - 128.0
    cb = np.asarray(crcb, dtype=np.float64)[:, :, 1] - 128.0
    r = yv + 1.402 * cr
    g = yv - 0.344136 * cb - 0.714136 * cr
    b = yv + 1.772 * cb
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)


def hist_equalize(y: np.ndarray) -> np.ndarray:
    """Classic 256-bin histogram equalization of a luminance plane.

    h(v) = round((cdf(v) - cdf_min) / (n - cdf_min) * 255) over gray levels
    obtained by rounding to the nearest integer in [0, 255]. A constant plane
    is returned unchanged (the formula would divide by zero).
    """
    arr = np.asarray(y, dtype=np.float64)
    if arr.min() < 0 or arr.max() > 255:
        raise DataError("hist_equalize expects values in [0, 255]")
    levels = np.clip(np.floor(arr + 0.5), 0, 255).astype(np.intp)
    hist = np.bincount(levels.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    n = levels.size
    cdf_min = cdf[np.nonzero(hist)[0][0]]
    if cdf_min == n:  # single gray level
        return arr.copy()
    lut = np.floor((cdf - cdf_min) / (n - cdf_min) * 255.0 + 0.5)
    lut = np.clip(lut, 0, 255)
    return lut[levels].astype(np.float64)


def simulate_low_resolution(img: np.ndarray, low_side: int = 16) -> np.ndarray:
    """Degrade an image by bilinear downsampling to ``low_side`` and back."""
    h, w = img.shape[:2]
    small = resize_bilinear(img, low_side, low_side)
    return resize_bilinear(small, w, h)


def preprocess_image(
    img: np.ndarray,
    size: int = 32,
    equalize: bool = True,
    low_resolution: int | None = None,
    crop_square: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Full normalization chain for one aligned RGB face.

    Returns the (size, size, 1) Y plane (equalized unless disabled) and the
    (size, size, 2) CrCb plane pair, both float64.
    """
    if crop_square:
        img = center_crop_square(img)
    if img.shape[0] != size or img.shape[1] != size:
        img = resize_bilinear(img, size, size)
    if low_resolution is not None:
        img = simulate_low_resolution(img, low_resolution)
    y, crcb = to_ycbcr(img)
    if equalize:
        y = hist_equalize(y[:, :, 0])[:, :, None]
    return y, crcb
