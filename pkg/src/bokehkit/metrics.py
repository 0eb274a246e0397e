"""Fidelity metrics and the challenge scoring formula.

SSIM follows the usual Gaussian-window construction: local statistics are
taken over the *valid* region only (no padding), and the SSIM map is
averaged. Multi-channel inputs are scored per channel and averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imaging import as_image

__all__ = [
    "PSNR_CAP", "MS_SSIM_WEIGHTS", "SsimParams", "LeaderboardRow", "TABLE1",
    "psnr", "ssim", "ssim_with_grad", "ms_ssim",
    "challenge_score", "calibrate_score_constant", "DEFAULT_SCORE_CONSTANT",
]

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0 or self.window_sigma <= 0:
            raise ValueError("k1, k2, window_sigma and dynamic_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def window(self) -> np.ndarray:
        r = self.window_size // 2
        t = np.arange(-r, r + 1, dtype=np.float64)
        g = np.exp(-0.5 * (t / self.window_sigma) ** 2)
        return g / g.sum()


def _same_shape(a, b):
    a = as_image(a, "a")
    b = as_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB, pooling the squared error over all pixels and channels.

    Capped at ``PSNR_CAP`` so identical images give a finite value.
    """
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _filt(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of a (H, W) plane with window ``g``."""
    n = g.size
    h, w = x.shape
    rows = sum(g[i] * x[i:h - n + 1 + i, :] for i in range(n))
    return sum(g[j] * rows[:, j:w - n + 1 + j] for j in range(n))


def _filt_adjoint(y: np.ndarray, g: np.ndarray, shape) -> np.ndarray:
    n = g.size
    h, w = shape
    cols = np.zeros((y.shape[0], w))
    for j in range(n):
        cols[:, j:w - n + 1 + j] += g[j] * y
    out = np.zeros((h, w))
    for i in range(n):
        out[i:h - n + 1 + i, :] += g[i] * cols
    return out


def _ssim_plane(x, y, p: SsimParams, want_grad: bool):
    g = p.window()
    c1, c2 = p.c1, p.c2
    mx, my = _filt(x, g), _filt(y, g)
    exx, eyy, exy = _filt(x * x, g), _filt(y * y, g), _filt(x * y, g)
    vx = exx - mx * mx
    vy = eyy - my * my
    cxy = exy - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * cxy + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not want_grad:
        return value, None
    n = smap.size
    # partials of each map entry w.r.t. the local moments of x
    d_mx = smap * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2) / n
    d_exx = -smap / b2 / n
    d_exy = 2 * smap / a2 / n
    grad = (_filt_adjoint(d_mx, g, x.shape)
            + 2 * x * _filt_adjoint(d_exx, g, x.shape)
            + y * _filt_adjoint(d_exy, g, x.shape))
    return value, grad


def ssim_with_grad(a, b, params: SsimParams | None = None, want_grad: bool = True):
    """Mean SSIM of ``a`` against ``b`` and its gradient with respect to ``a``."""
    p = params or SsimParams()
    a, b = _same_shape(a, b)
    if min(a.shape[1:]) < p.window_size:
        raise ValueError(f"image {a.shape[1:]} smaller than the {p.window_size}px SSIM window")
    vals, grads = [], []
    for ca, cb in zip(a, b):
        v, gr = _ssim_plane(ca, cb, p, want_grad)
        vals.append(v)
        grads.append(gr)
    value = float(np.mean(vals))
    if not want_grad:
        return value, None
    return value, np.stack(grads) / a.shape[0]


def ssim(a, b, params: SsimParams | None = None) -> float:
    return ssim_with_grad(a, b, params, want_grad=False)[0]


def _contrast_structure(x, y, p: SsimParams):
    g = p.window()
    c2 = p.c2
    mx, my = _filt(x, g), _filt(y, g)
    vx = _filt(x * x, g) - mx * mx
    vy = _filt(y * y, g) - my * my
    cxy = _filt(x * y, g) - mx * my
    return float(np.mean((2 * cxy + c2) / (vx + vy + c2)))


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(a, b, params: SsimParams | None = None, levels: int = 5) -> float:
    """Multi-scale SSIM with the canonical five-scale weights.

    With fewer than five levels the leading weights are renormalised to sum
    to one, so ``levels=1`` reduces to plain SSIM. Negative contrast terms
    of the finer scales are clamped to zero before exponentiation; the
    coarsest-scale SSIM term is raised with its sign kept.
    """
    p = params or SsimParams()
    if not 1 <= levels <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"levels must be in 1..{len(MS_SSIM_WEIGHTS)}")
    a, b = _same_shape(a, b)
    need = p.window_size * 2 ** (levels - 1)
    if min(a.shape[1:]) < need:
        raise ValueError(f"image {a.shape[1:]} too small for {levels} MS-SSIM levels (needs {need})")
    w = np.array(MS_SSIM_WEIGHTS[:levels])
    w = w / w.sum()
    scores = []
    for ca, cb in zip(a, b):
        x, y = ca, cb
        total = 1.0
        for lvl in range(levels):
            if lvl == levels - 1:
                # full SSIM at the coarsest scale keeps its sign
                term = _ssim_plane(x, y, p, False)[0]
                total *= math.copysign(abs(term) ** w[lvl], term)
            else:
                term = _contrast_structure(x, y, p)
                x, y = _avg_pool2(x), _avg_pool2(y)
                total *= max(term, 0.0) ** w[lvl]
        scores.append(total)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Challenge score
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LeaderboardRow:
    team: str
    psnr: float
    ssim: float
    runtime_ms: float
    score: float
    baseline: bool = False  # reference entries are listed after the ranked teams

    def __post_init__(self):
        if math.isfinite(self.psnr) and self.psnr < 0:
            raise ValueError(f"{self.team}: negative PSNR")
        if not self.runtime_ms > 0:
            raise ValueError(f"{self.team}: runtime must be positive")
        if not self.score >= 0:
            raise ValueError(f"{self.team}: score must be non-negative")


# Rows of the published results table that carry a final score. Teams whose
# GPU runtime was reported as an error have no score and are omitted.
TABLE1 = (
    LeaderboardRow("Antins_cv", 22.76, 0.8652, 28.1, 74),
    LeaderboardRow("ENERZAi", 22.89, 0.8754, 89.3, 28),
    LeaderboardRow("MiAIgo", 20.08, 0.7209, 112, 0.5),
    LeaderboardRow("PyNET", 23.28, 0.8780, 3512, 1.2, baseline=True),
)


def challenge_score(psnr_db: float, runtime_ms: float, c: float) -> float:
    """``2 ** (2 * psnr) / (c * runtime_ms)``."""
    if not runtime_ms > 0:
        raise ValueError("runtime must be positive")
    if not c > 0:
        raise ValueError("normalisation constant must be positive")
    return 2.0 ** (2.0 * psnr_db) / (c * runtime_ms)


def calibrate_score_constant(row: LeaderboardRow) -> float:
    """Recover the normalisation constant from one scored leaderboard row."""
    if not math.isfinite(row.psnr):
        raise ValueError(f"{row.team}: PSNR must be finite")
    if row.score <= 0 or row.runtime_ms <= 0:
        raise ValueError(f"{row.team}: score and runtime must be positive to calibrate")
    return 2.0 ** (2.0 * row.psnr) / (row.score * row.runtime_ms)


DEFAULT_SCORE_CONSTANT = calibrate_score_constant(TABLE1[0])
