"""Wide/shallow pair preprocessing: pair discovery, translation alignment,
crop to the common region and downscale to a canonical height.

Alignment is an exhaustive search over integer translations scored by
zero-normalised cross-correlation, run coarse-to-fine. Offsets follow the
convention ``b[y + dy, x + dx] == a[y, x]``.
"""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imaging import as_image, load_image, resize_bilinear, save_image, to_grayscale

log = logging.getLogger(__name__)

__all__ = [
    "PairEntry", "PairManifest", "PairScanError", "AlignmentError",
    "scan_pairs", "estimate_translation", "crop_to_overlap",
    "downscale_to_height", "prepare_pairs", "ALIGN_METHOD",
]

ALIGN_METHOD = "ncc-integer-translation"
MIN_OVERLAP = 16
_PAIR_RE = re.compile(r"^(?P<id>.+)_(?P<kind>wide|shallow)\.png$", re.IGNORECASE)


class PairScanError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class PairEntry:
    id: str
    wide: str
    shallow: str
    offset: tuple[int, int] | None = None
    size: tuple[int, int] | None = None


@dataclass
class PairManifest:
    entries: list[PairEntry]
    split: str = "train"
    method: str = ALIGN_METHOD
    unpaired: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise PairScanError("manifest ids are not unique")

    def to_json(self) -> str:
        doc = asdict(self)
        for e in doc["entries"]:
            for key in ("offset", "size"):
                if e[key] is not None:
                    e[key] = list(e[key])
        return json.dumps(doc, indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "PairManifest":
        doc = json.loads(Path(path).read_text())
        entries = []
        for e in doc["entries"]:
            entries.append(PairEntry(
                id=e["id"], wide=e["wide"], shallow=e["shallow"],
                offset=tuple(e["offset"]) if e.get("offset") is not None else None,
                size=tuple(e["size"]) if e.get("size") is not None else None,
            ))
        return cls(entries=entries, split=doc.get("split", "train"),
                   method=doc.get("method", ALIGN_METHOD), unpaired=doc.get("unpaired", []))


def _id_key(pid: str):
    # numeric ids sort numerically and come before non-numeric ones
    return (0, int(pid), pid) if pid.isdigit() else (1, 0, pid)


def scan_pairs(root, split: str = "train") -> PairManifest:
    """Find ``<id>_wide.png`` / ``<id>_shallow.png`` pairs under ``root``.

    Files without a partner are logged and listed in ``manifest.unpaired``.
    Ids that collide after normalisation (``3`` vs ``03``, case) are an error.
    """
    root = Path(root)
    names = sorted(os.listdir(root)) if root.is_dir() else []
    if not names:
        raise PairScanError(f"{root}: no files found")
    found: dict[tuple, dict[str, str]] = {}
    raw_ids: dict[tuple, str] = {}
    for name in names:
        m = _PAIR_RE.match(name)
        if not m:
            continue
        pid, kind = m.group("id"), m.group("kind").lower()
        key = ("n", int(pid)) if pid.isdigit() else ("s", pid.lower())
        slot = found.setdefault(key, {})
        if kind in slot or (key in raw_ids and raw_ids[key] != pid):
            raise PairScanError(f"{root}: duplicate id {pid!r} ({name})")
        raw_ids[key] = pid
        slot[kind] = str(root / name)
    if not found:
        raise PairScanError(f"{root}: no *_wide.png / *_shallow.png files")
    entries, unpaired = [], []
    for key, slot in found.items():
        pid = raw_ids[key]
        if "wide" in slot and "shallow" in slot:
            entries.append(PairEntry(pid, slot["wide"], slot["shallow"]))
        else:
            path = next(iter(slot.values()))
            log.warning("unpaired file %s", path)
            unpaired.append(path)
    entries.sort(key=lambda e: _id_key(e.id))
    return PairManifest(entries=entries, split=split, unpaired=sorted(unpaired))


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------

def _overlap(h: int, w: int, dy: int, dx: int):
    """Slices of ``a`` and ``b`` covering the same scene under offset (dy, dx)."""
    ay = slice(max(0, -dy), h - max(0, dy))
    by = slice(max(0, dy), h - max(0, -dy))
    ax = slice(max(0, -dx), w - max(0, dx))
    bx = slice(max(0, dx), w - max(0, -dx))
    return (ay, ax), (by, bx)


def _zncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        return -np.inf
    return float((a * b).sum() / denom)


def _search(a, b, candidates, min_overlap):
    h, w = a.shape
    best, best_key = None, None
    for dy, dx in candidates:
        if h - abs(dy) < min_overlap or w - abs(dx) < min_overlap:
            continue
        sa, sb = _overlap(h, w, dy, dx)
        score = _zncc(a[sa], b[sb])
        if not np.isfinite(score):
            continue
        # highest score, then smallest |dy|+|dx|, then lexicographic
        key = (-score, abs(dy) + abs(dx), dy, dx)
        if best_key is None or key < best_key:
            best, best_key = (dy, dx), key
    return best


def _pool4(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 4) * 4, (x.shape[1] // 4) * 4
    return x[:h, :w].reshape(h // 4, 4, w // 4, 4).mean(axis=(1, 3))


def estimate_translation(a, b, search: int = 10, refine: int = 2) -> tuple[int, int]:
    """Integer offset ``(dy, dx)`` in ``[-search, search]**2`` aligning ``b`` to ``a``.

    The search runs on 4x average-pooled luma first, then refines within
    ``refine`` pixels of the upscaled coarse estimate at full resolution.
    Offsets leaving less than 16x16 of overlap are skipped.
    """
    a = to_grayscale(a)[0]
    b = to_grayscale(b)[0]
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if search < 0:
        raise ValueError("search radius must be >= 0")
    h, w = a.shape
    centre = (0, 0)
    coarse_r = -(-search // 4)
    if search > refine and min(h, w) >= 4 * MIN_OVERLAP:
        ca, cb = _pool4(a), _pool4(b)
        cands = [(dy, dx) for dy in range(-coarse_r, coarse_r + 1) for dx in range(-coarse_r, coarse_r + 1)]
        hit = _search(ca, cb, cands, MIN_OVERLAP // 4)
        if hit is not None:
            centre = (4 * hit[0], 4 * hit[1])
        span = refine
    else:
        span = search
    cands = [(dy, dx)
             for dy in range(max(-search, centre[0] - span), min(search, centre[0] + span) + 1)
             for dx in range(max(-search, centre[1] - span), min(search, centre[1] + span) + 1)]
    best = _search(a, b, cands, MIN_OVERLAP)
    if best is None:
        raise AlignmentError("no candidate offset left a usable overlap")
    return best


def crop_to_overlap(a, b, offset) -> tuple[np.ndarray, np.ndarray]:
    a = as_image(a, "a")
    b = as_image(b, "b")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"spatial size mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    dy, dx = (int(v) for v in offset)
    _, h, w = a.shape
    if abs(dy) >= h or abs(dx) >= w:
        raise ValueError(f"offset {(dy, dx)} leaves no overlap in a {h}x{w} image")
    (ay, ax), (by, bx) = _overlap(h, w, dy, dx)
    return a[:, ay, ax].copy(), b[:, by, bx].copy()


def downscale_to_height(img, target_h: int = 1024) -> np.ndarray:
    img = as_image(img)
    if target_h < 1:
        raise ValueError("target height must be >= 1")
    _, h, w = img.shape
    target_w = max(1, int(np.floor(w * target_h / h + 0.5)))
    return resize_bilinear(img, target_h, target_w)


def _prepare_one(entry: PairEntry, out_dir: Path, target_h: int, search: int, depth: int) -> PairEntry:
    wide = load_image(entry.wide)
    shallow = load_image(entry.shallow)
    if wide.shape[1:] != shallow.shape[1:]:
        raise ValueError(f"pair {entry.id}: sizes differ {wide.shape[1:]} vs {shallow.shape[1:]}")
    offset = estimate_translation(wide, shallow, search)
    wa, sa = crop_to_overlap(wide, shallow, offset)
    wa = downscale_to_height(wa, target_h)
    sa = downscale_to_height(sa, target_h)
    wide_out = out_dir / f"{entry.id}_wide.png"
    shallow_out = out_dir / f"{entry.id}_shallow.png"
    save_image(wa, wide_out, depth)
    save_image(sa, shallow_out, depth)
    return PairEntry(entry.id, str(wide_out), str(shallow_out), offset, tuple(wa.shape[1:]))


def prepare_pairs(root, out_dir, target_h: int = 1024, search: int = 10, depth: int = 16,
                  split: str = "train", jobs: int = 1) -> PairManifest:
    """Align, crop and downscale every pair under ``root`` into ``out_dir``.

    Writes ``manifest.json`` next to the outputs. Entries keep id order no
    matter how many workers run.
    """
    src = scan_pairs(root, split)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    work = lambda e: _prepare_one(e, out_dir, target_h, search, depth)  # noqa: E731
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            entries = list(pool.map(work, src.entries))
    else:
        entries = [work(e) for e in src.entries]
    manifest = PairManifest(entries=entries, split=split, unpaired=src.unpaired)
    manifest.save(out_dir / "manifest.json")
    return manifest
