"""Forward pass of a tiny three-level U-Net with pixel-shuffle upsampling.

Feature maps are ``(C, H, W)`` float64 arrays. Weights live in a flat
``dict`` mapping ``"<layer>.weight"`` / ``"<layer>.bias"`` to float32 arrays
and round-trip through the ``BKW1`` binary container.

Graph for ``levels = L`` and base width ``C``::

    enc1 .. enc{L-1}   3x3 stride-2 conv + leaky ReLU, width C * 2**(i-1)
    mid                3x3 conv + leaky ReLU at the coarsest scale
    dec{L-1} .. dec1   concat skip, 3x3 conv to 4x width, pixel shuffle x2
                       (leaky ReLU except after dec1)

The output is clamped to [0, 1].
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .imaging import as_image

__all__ = [
    "NetSpec", "WeightFormatError", "BadMagicError", "TruncatedWeightsError",
    "DuplicateTensorError", "ShapeMismatchError", "WeightSpecError",
    "conv_layer", "leaky_relu", "pixel_shuffle", "space_to_depth",
    "layer_table", "count_flops", "random_weights", "validate_weights",
    "unet_forward", "save_weights", "load_weights",
]

MAGIC = b"BKW1"
_BAND_VALUES = 1 << 16


@dataclass(frozen=True)
class NetSpec:
    levels: int = 3
    base_channels: int = 16
    skip_connections: bool = True
    leaky_slope: float = 0.2
    channels: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in [0, 1)")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.levels - 1)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _conv_rows(xp, w, stride, row0, row1, wo):
    cout = w.shape[0]
    out = np.zeros((cout, row1 - row0, wo))
    for i in range(3):
        for j in range(3):
            patch = xp[:, i + stride * row0:i + stride * (row1 - 1) + 1:stride,
                       j:j + stride * (wo - 1) + 1:stride]
            out += np.tensordot(w[:, :, i, j], patch, axes=(1, 0))
    return out


def conv_layer(x, w, b, stride: int = 1, jobs: int = 1) -> np.ndarray:
    """3x3 cross-correlation with replicate padding.

    Output size is ``ceil(h / stride) x ceil(w / stride)``. Output rows are
    computed in bands, on a thread pool when ``jobs > 1``; the band layout
    does not depend on ``jobs``, so results are bit-identical for any value.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"weights must have shape (out, in, 3, 3), got {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ValueError(f"input has {x.shape[0]} channels, weights expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
    _, h, wd = x.shape
    ho, wo = -(-h // stride), -(-wd // stride)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    # fixed-size bands keep the working set cache-sized, so cost stays
    # proportional to the pixel count
    step = max(1, _BAND_VALUES // max(1, wo * max(w.shape[0], w.shape[1])))
    edges = list(range(0, ho, step)) + [ho]
    bands = [(edges[k], edges[k + 1]) for k in range(len(edges) - 1)]
    work = lambda band: _conv_rows(xp, w, stride, band[0], band[1], wo)  # noqa: E731
    if jobs <= 1 or len(bands) < 2:
        parts = [work(band) for band in bands]
    else:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(work, bands))
    return np.concatenate(parts, axis=1) + b[:, None, None]


def leaky_relu(x, slope: float = 0.2) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, slope * x)


def pixel_shuffle(x, r: int = 2) -> np.ndarray:
    """Depth-to-space: ``(c * r * r, h, w) -> (c, h * r, w * r)``.

    Channel ``k * r**2 + i * r + j`` lands at sub-pixel ``(i, j)`` of output
    channel ``k``.
    """
    x = np.asarray(x)
    c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"{c} channels not divisible by {r * r}")
    return x.reshape(c // (r * r), r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c // (r * r), h * r, w * r)


def space_to_depth(x, r: int = 2) -> np.ndarray:
    x = np.asarray(x)
    c, h, w = x.shape
    if h % r or w % r:
        raise ValueError(f"spatial size {h}x{w} not divisible by {r}")
    return x.reshape(c, h // r, r, w // r, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h // r, w // r)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

def layer_table(spec: NetSpec) -> "OrderedDict[str, tuple[int, int, int]]":
    """Ordered ``name -> (out_channels, in_channels, stride)`` for every conv."""
    table = OrderedDict()
    c, base = spec.channels, spec.base_channels
    widths = [base * 2 ** i for i in range(spec.levels - 1)]
    ch = c
    for i, wdt in enumerate(widths, start=1):
        table[f"enc{i}"] = (wdt, ch, 2)
        ch = wdt
    mid = widths[-1] if widths else base
    table["mid"] = (mid, ch, 1)
    ch = mid
    if spec.levels == 1:
        table["out"] = (c, ch + (c if spec.skip_connections else 0), 1)
        return table
    for i in range(spec.levels - 1, 0, -1):
        skip = widths[i - 1] if spec.skip_connections else 0
        out_ch = widths[i - 2] if i > 1 else c
        table[f"dec{i}"] = (out_ch * 4, ch + skip, 1)
        ch = out_ch
    return table


def count_flops(spec: NetSpec, h: int, w: int) -> int:
    """Multiply-add FLOPs (2 per MAC) of all convolutions for an h x w input."""
    total = 0
    size = (h, w)
    for name, (cout, cin, stride) in layer_table(spec).items():
        if stride == 2:
            size = (-(-size[0] // 2), -(-size[1] // 2))
        total += 2 * 9 * cin * cout * size[0] * size[1]
        if name.startswith("dec"):
            size = (size[0] * 2, size[1] * 2)
    return total


def random_weights(spec: NetSpec, seed: int = 0) -> dict:
    """Uniform(-s, s) initialisation with ``s = sqrt(1 / fan_in)``."""
    rng = np.random.default_rng(seed)
    store = {}
    for name, (cout, cin, _) in layer_table(spec).items():
        s = np.sqrt(1.0 / (cin * 9))
        store[f"{name}.weight"] = rng.uniform(-s, s, (cout, cin, 3, 3)).astype(np.float32)
        store[f"{name}.bias"] = rng.uniform(-s, s, cout).astype(np.float32)
    return store


class WeightSpecError(ValueError):
    """A weight store lacks tensors, or holds misshaped ones, for a NetSpec."""


def validate_weights(store: dict, spec: NetSpec) -> None:
    expected = {}
    for name, (cout, cin, _) in layer_table(spec).items():
        expected[f"{name}.weight"] = (cout, cin, 3, 3)
        expected[f"{name}.bias"] = (cout,)
    missing = sorted(set(expected) - set(store))
    if missing:
        raise WeightSpecError(f"missing tensors: {', '.join(missing)}")
    for key, shape in expected.items():
        got = tuple(np.shape(store[key]))
        if got != shape:
            raise WeightSpecError(f"{key}: expected shape {shape}, got {got}")


def unet_forward(img, weights: dict, spec: NetSpec | None = None, jobs: int = 1) -> np.ndarray:
    spec = spec or NetSpec()
    x = as_image(img)
    if x.shape[0] != spec.channels:
        raise ValueError(f"network expects {spec.channels} channels, got {x.shape[0]}")
    k = spec.size_multiple
    if x.shape[1] % k or x.shape[2] % k:
        raise ValueError(f"input size {x.shape[1]}x{x.shape[2]} must be divisible by {k}")
    validate_weights(weights, spec)
    table = layer_table(spec)

    def conv(name, t):
        return conv_layer(t, weights[f"{name}.weight"], weights[f"{name}.bias"], table[name][2], jobs)

    def act(t):
        return leaky_relu(t, spec.leaky_slope)

    skips = []
    h = x
    for i in range(1, spec.levels):
        h = act(conv(f"enc{i}", h))
        skips.append(h)
    h = act(conv("mid", h))
    if spec.levels == 1:
        if spec.skip_connections:
            h = np.concatenate([h, x])
        return np.clip(conv("out", h), 0.0, 1.0)
    for i in range(spec.levels - 1, 0, -1):
        if spec.skip_connections:
            h = np.concatenate([h, skips[i - 1]])
        h = pixel_shuffle(conv(f"dec{i}", h), 2)
        if i > 1:
            h = act(h)
    return np.clip(h, 0.0, 1.0)


# ---------------------------------------------------------------------------
# BKW1 container
# ---------------------------------------------------------------------------

class WeightFormatError(ValueError):
    pass


class BadMagicError(WeightFormatError):
    pass


class TruncatedWeightsError(WeightFormatError):
    pass


class DuplicateTensorError(WeightFormatError):
    pass


class ShapeMismatchError(WeightFormatError):
    pass


def save_weights(store: dict, path) -> None:
    """Write ``store`` as BKW1: magic, u32 count, then per tensor u16 name
    length, UTF-8 name, u8 rank, u32 dims, float32 payload (all little-endian).
    """
    chunks = [MAGIC, struct.pack("<I", len(store))]
    for name, arr in store.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_weights(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a BKW1 weight file (magic {buf[:4]!r})")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedWeightsError(f"{path}: file ends inside {what}")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4, "the tensor count"))
    store = {}
    for idx in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"the name length of tensor #{idx}"))
        name = take(nlen, f"the name of tensor #{idx}").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"the rank of tensor {name!r}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"the shape of tensor {name!r}"))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * n, f"the payload of tensor {name!r}"), dtype="<f4")
        if name in store:
            raise DuplicateTensorError(f"{path}: tensor {name!r} appears twice")
        store[name] = data.reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise ShapeMismatchError(
            f"{path}: {len(buf) - pos} trailing bytes after {count} tensors; shape table does not match payload")
    return store
