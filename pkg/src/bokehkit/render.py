"""Classical disparity-guided bokeh rendering.

Pipeline: normalise the disparity map, derive a soft foreground mask and a
per-pixel blur radius, gather-blur the image with a disc of that radius and
blend the sharp foreground back on top.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .imaging import as_image, as_plane

log = logging.getLogger(__name__)

__all__ = [
    "DegenerateDepthError", "RenderParams", "normalize_disparity",
    "saliency_from_disparity", "radius_map", "disc_blur", "disc_blur_bruteforce",
    "composite_bokeh", "render_bokeh",
]


class DegenerateDepthError(ValueError):
    """The disparity map is constant, so near and far cannot be told apart."""


@dataclass(frozen=True)
class RenderParams:
    max_radius: float = 16.0
    focal_disparity: float = 1.0
    mask_threshold: float = 0.6
    feather: float = 0.05  # half-width of the mask ramp, in normalised disparity

    def __post_init__(self):
        if self.max_radius < 0:
            raise ValueError("max_radius must be >= 0")
        if self.feather < 0:
            raise ValueError("feather must be >= 0")
        if not 0.0 <= self.focal_disparity <= 1.0:
            raise ValueError("focal_disparity must lie in [0, 1]")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ValueError("mask_threshold must lie in [0, 1]")


def normalize_disparity(d) -> np.ndarray:
    d = as_plane(d, "disparity")
    lo, hi = float(d.min()), float(d.max())
    if hi == lo:
        raise DegenerateDepthError(f"disparity map is constant ({lo})")
    return (d - lo) / (hi - lo)


def saliency_from_disparity(d, threshold: float = 0.6, feather: float = 0.05) -> np.ndarray:
    """Linear ramp from 0 at ``threshold - feather`` to 1 at ``threshold + feather``."""
    d = as_plane(d, "disparity")
    if feather == 0:
        return (d >= threshold).astype(np.float64)
    return np.clip((d - (threshold - feather)) / (2.0 * feather), 0.0, 1.0)


def radius_map(d, p: RenderParams) -> np.ndarray:
    d = as_plane(d, "disparity")
    f = p.focal_disparity
    span = max(f, 1.0 - f)
    return np.clip(p.max_radius * np.abs(d - f) / span, 0.0, p.max_radius)


def _int_radii(r: np.ndarray) -> np.ndarray:
    # round half up; the disc only depends on the integer radius
    return np.floor(np.maximum(r, 0.0) + 0.5).astype(np.intp)


def disc_blur(img, radius) -> np.ndarray:
    """Spatially varying disc blur (gather model).

    Each output pixel is the mean of the input pixels within Euclidean
    distance ``round(radius)`` of it, restricted to the image. Pixels sharing
    a radius are processed together: the disc is split into horizontal spans
    whose sums come from per-row prefix sums.
    """
    img = as_image(img)
    r = as_plane(radius, "radius")
    c, h, w = img.shape
    if r.shape != (h, w):
        raise ValueError(f"radius map {r.shape} does not match image {(h, w)}")
    ri = _int_radii(r)
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    # work on non-negative offsets so prefix sums are monotone and a constant
    # image stays exactly constant
    shifted = img - lo
    out = img.copy()
    # prefix[:, y, x] = sum of shifted[:, y, :x]
    prefix = np.zeros((c, h, w + 1))
    np.cumsum(shifted, axis=2, out=prefix[:, :, 1:])
    for rad in np.unique(ri):
        if rad == 0:
            continue
        ys, xs = np.nonzero(ri == rad)
        acc = np.zeros((c, ys.size))
        count = np.zeros(ys.size)
        for dy in range(-rad, rad + 1):
            yy = ys + dy
            ok = (yy >= 0) & (yy < h)
            if not ok.any():
                continue
            half = math.isqrt(rad * rad - dy * dy)
            x0 = np.maximum(xs[ok] - half, 0)
            x1 = np.minimum(xs[ok] + half, w - 1)
            acc[:, ok] += prefix[:, yy[ok], x1 + 1] - prefix[:, yy[ok], x0]
            count[ok] += x1 - x0 + 1
        out[:, ys, xs] = np.clip(acc / count + lo[:, :, 0], lo[:, :, 0], hi[:, :, 0])
    return out


def disc_blur_bruteforce(img, radius) -> np.ndarray:
    """Per-pixel enumeration of the disc; slow, kept as a reference."""
    img = as_image(img)
    r = _int_radii(as_plane(radius, "radius"))
    _, h, w = img.shape
    if r.shape != (h, w):
        raise ValueError(f"radius map {r.shape} does not match image {(h, w)}")
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            rad = int(r[y, x])
            y0, y1 = max(y - rad, 0), min(y + rad + 1, h)
            x0, x1 = max(x - rad, 0), min(x + rad + 1, w)
            yy, xx = np.mgrid[y0:y1, x0:x1]
            inside = (yy - y) ** 2 + (xx - x) ** 2 <= rad * rad
            out[:, y, x] = img[:, y0:y1, x0:x1][:, inside].mean(axis=1)
    return out


def composite_bokeh(sharp, blurred, m) -> np.ndarray:
    """Per-pixel blend ``m * sharp + (1 - m) * blurred``."""
    sharp = as_image(sharp, "sharp")
    blurred = as_image(blurred, "blurred")
    m = np.clip(as_plane(m, "mask"), 0.0, 1.0)
    if sharp.shape != blurred.shape or m.shape != sharp.shape[1:]:
        raise ValueError(f"size mismatch: {sharp.shape}, {blurred.shape}, mask {m.shape}")
    # blurred + m * (sharp - blurred) is exact wherever the two inputs agree
    out = blurred + m * (sharp - blurred)
    return np.where(m == 1.0, sharp, out)


def render_bokeh(img, disparity, p: RenderParams | None = None) -> np.ndarray:
    """Render a shallow depth-of-field version of ``img``.

    A constant disparity map carries no depth information; it is treated as
    all-background (zeros) with a warning.
    """
    p = p or RenderParams()
    img = as_image(img)
    d = as_plane(disparity, "disparity")
    if d.shape != img.shape[1:]:
        raise ValueError(f"disparity {d.shape} does not match image {img.shape[1:]}")
    try:
        d = normalize_disparity(d)
    except DegenerateDepthError:
        log.warning("constant disparity map; rendering with zero disparity")
        d = np.zeros_like(d)
    mask = saliency_from_disparity(d, p.mask_threshold, p.feather)
    blurred = disc_blur(img, radius_map(d, p))
    return composite_bokeh(img, blurred, mask)
