"""Raster primitives shared by every other module.

Images are numpy arrays of shape ``(C, H, W)`` (planar, row-major) holding
float64 values with a nominal range of [0, 1]. ``C`` is 1 or 3. Masks and
disparity maps are plain ``(H, W)`` arrays.
"""

from __future__ import annotations

import hashlib
import os
import zlib
from dataclasses import dataclass

import numpy as np
import png

__all__ = [
    "ImageError", "UnsupportedImageError", "CorruptImageError",
    "Rect", "as_image", "as_kernel", "as_plane",
    "load_image", "save_image", "to_grayscale", "resize_bilinear",
    "crop_rect", "convolve2d", "convolve2d_adjoint", "quantize", "image_checksum",
]

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ImageError(ValueError):
    """Base class for raster validation and decoding failures."""


class UnsupportedImageError(ImageError):
    """PNG decodes fine but uses a bit depth or channel layout we refuse."""


class CorruptImageError(ImageError):
    """The PNG stream itself is damaged."""


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.top < 0 or self.left < 0:
            raise ValueError(f"negative rect origin: {self}")
        if self.height < 1 or self.width < 1:
            raise ValueError(f"empty rect: {self}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width


def as_image(x, name: str = "image") -> np.ndarray:
    """Validate ``x`` as an image and return it as a float64 (C, H, W) array.

    A 2-D array is promoted to a single channel.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ImageError(f"{name}: expected (C, H, W) with C in {{1, 3}}, got shape {arr.shape}")
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ImageError(f"{name}: empty raster {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ImageError(f"{name}: contains NaN or Inf")
    return arr


def as_plane(x, name: str = "plane") -> np.ndarray:
    """Validate a single-channel raster and return it as a float64 (H, W) array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ImageError(f"{name}: expected a single-channel raster, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ImageError(f"{name}: contains NaN or Inf")
    return arr


def as_kernel(k) -> np.ndarray:
    arr = np.asarray(k, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] % 2 == 0 or arr.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be 2-D with odd extents, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("kernel taps must be finite")
    return arr


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale/RGB PNG into a (C, H, W) float image.

    Raises
    ------
    FileNotFoundError
        ``path`` does not exist.
    UnsupportedImageError
        Alpha channel, or a bit depth other than 8/16.
    CorruptImageError
        The file is not a decodable PNG.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    try:
        reader = png.Reader(filename=path)
        width, height, rows, info = reader.asDirect()
        if info["alpha"]:
            raise UnsupportedImageError(f"{path}: alpha channels are not supported")
        depth = info["bitdepth"]
        if depth not in (8, 16):
            raise UnsupportedImageError(f"{path}: unsupported bit depth {depth}")
        planes = info["planes"]
        if planes not in (1, 3):
            raise UnsupportedImageError(f"{path}: unsupported channel count {planes}")
        dtype = np.uint16 if depth == 16 else np.uint8
        data = np.vstack([np.asarray(row, dtype=dtype) for row in rows])
    except (png.Error, zlib.error, EOFError) as exc:
        raise CorruptImageError(f"{path}: {exc}") from exc
    if data.shape != (height, width * planes):
        raise CorruptImageError(f"{path}: decoded {data.shape}, header says {height}x{width}x{planes}")
    scale = float(2 ** depth - 1)
    img = data.reshape(height, width, planes).transpose(2, 0, 1).astype(np.float64) / scale
    return np.ascontiguousarray(img)


def quantize(img: np.ndarray, depth: int) -> np.ndarray:
    """Clamp to [0, 1] and round half up to ``depth``-bit integer codes."""
    if depth not in (8, 16):
        raise ValueError(f"depth must be 8 or 16, got {depth}")
    top = 2 ** depth - 1
    codes = np.floor(np.clip(img, 0.0, 1.0) * top + 0.5)
    return codes.astype(np.uint16 if depth == 16 else np.uint8)


def image_checksum(img) -> str:
    """SHA-256 of the 16-bit quantised image; insensitive to last-bit float noise."""
    codes = quantize(as_image(img), 16).astype("<u2")
    return hashlib.sha256(codes.tobytes()).hexdigest()


def save_image(img, path, depth: int = 8) -> None:
    img = as_image(img)
    codes = quantize(img, depth)
    c, h, w = codes.shape
    rows = codes.transpose(1, 2, 0).reshape(h, w * c)
    writer = png.Writer(width=w, height=h, greyscale=(c == 1), bitdepth=depth)
    with open(os.fspath(path), "wb") as fh:
        writer.write(fh, rows)


# ---------------------------------------------------------------------------
# Pixel operations
# ---------------------------------------------------------------------------

def to_grayscale(img) -> np.ndarray:
    """Rec.601 luma; a single-channel input comes back unchanged."""
    img = as_image(img)
    if img.shape[0] == 1:
        return img
    return np.tensordot(GRAY_WEIGHTS, img, axes=(0, 0))[None]


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    img = as_image(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    rows = img[:, y0, :] * (1 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def crop_rect(img, r: Rect) -> np.ndarray:
    img = as_image(img)
    _, h, w = img.shape
    if r.bottom > h or r.right > w:
        raise ValueError(f"{r} does not fit inside a {h}x{w} image")
    return img[:, r.top:r.bottom, r.left:r.right].copy()


def convolve2d(img, k) -> np.ndarray:
    """Cross-correlate a single-channel raster with ``k`` (replicate padding).

    Accepts ``(H, W)`` or ``(1, H, W)`` and returns the same layout.
    """
    arr = np.asarray(img, dtype=np.float64)
    planar = arr.ndim == 3
    if planar and arr.shape[0] != 1:
        raise ImageError(f"convolve2d needs a single-channel image, got {arr.shape[0]} channels")
    x = as_plane(arr, "convolve2d input")
    k = as_kernel(k)
    kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    h, w = x.shape
    xp = np.pad(x, ((ph, ph), (pw, pw)), mode="edge")
    out = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            if k[i, j] != 0.0:
                out += k[i, j] * xp[i:i + h, j:j + w]
    return out[None] if planar else out


def convolve2d_adjoint(g: np.ndarray, k) -> np.ndarray:
    """Adjoint of :func:`convolve2d` on ``(H, W)`` rasters.

    Satisfies ``<convolve2d(x, k), g> == <x, convolve2d_adjoint(g, k)>``; the
    replicate padding folds border contributions back onto the edge pixels.
    """
    g = np.asarray(g, dtype=np.float64)
    k = as_kernel(k)
    kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    h, w = g.shape
    acc = np.zeros((h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            if k[i, j] != 0.0:
                acc[i:i + h, j:j + w] += k[i, j] * g
    if ph:
        acc[ph] += acc[:ph].sum(axis=0)
        acc[ph + h - 1] += acc[ph + h:].sum(axis=0)
    if pw:
        acc[:, pw] += acc[:, :pw].sum(axis=1)
        acc[:, pw + w - 1] += acc[:, pw + w:].sum(axis=1)
    return acc[ph:ph + h, pw:pw + w]
