"""Bokeh-specific training losses with analytic gradients.

Every term is a scalar function of the predicted image ``pred`` (shape
``(C, H, W)``). :func:`loss_value` and :func:`loss_gradient` dispatch on a
stable string tag; :func:`finite_diff_gradient` is the independent
central-difference oracle used to check the analytic path.

Edge and total-variation terms operate on the Rec.601 luma of the image.
Subgradients at exact ties (``|0|``) are taken as zero; the analytic
gradient is only meaningful away from such kinks and callers are
responsible for not evaluating there.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .imaging import GRAY_WEIGHTS, as_image, as_plane, convolve2d, convolve2d_adjoint
from .metrics import SsimParams, ssim_with_grad

__all__ = [
    "SOBEL_KERNELS", "LOSS_TERMS", "MASK_EPS", "DEFAULT_BINS", "LossWeights",
    "sobel_edge_map", "foreground_edge_loss", "edge_difference_loss",
    "background_blur_loss", "l1_loss", "masked_l1_loss", "ssim_loss",
    "histogram_loss", "pretrain_loss", "loss_value", "loss_gradient",
    "finite_diff_gradient", "kink_margin",
]

SOBEL_KERNELS = {
    "x": np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]),
    "y": np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]),
    "xy": np.array([[2.0, 1.0, 0.0], [1.0, 0.0, -1.0], [0.0, -1.0, -2.0]]),
    "yx": np.array([[0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [-2.0, -1.0, 0.0]]),
}

MASK_EPS = 1e-8
DEFAULT_BINS = 32


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.1
    zeta: float = 0.05
    lambda_: float = 1.0
    kappa: float = 0.005
    mu: float = 0.1
    nu: float = 0.005

    def __post_init__(self):
        if not all(np.isfinite(v) for v in asdict(self).values()):
            raise ValueError("loss weights must be finite")

    def scaled(self, s: float) -> "LossWeights":
        return LossWeights(**{k: v * s for k, v in asdict(self).items()})


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _mask(m, shape) -> np.ndarray:
    m = np.clip(as_plane(m, "mask"), 0.0, 1.0)
    if m.shape != tuple(shape):
        raise ValueError(f"mask {m.shape} does not match image {tuple(shape)}")
    return m


def _luma(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 1:
        return img[0]
    return np.tensordot(GRAY_WEIGHTS, img, axes=(0, 0))


def _luma_adjoint(g: np.ndarray, channels: int) -> np.ndarray:
    if channels == 1:
        return g[None]
    return GRAY_WEIGHTS[:, None, None] * g[None]


def _pair(a, b, an="pred", bn="target"):
    a = as_image(a, an)
    b = as_image(b, bn)
    if a.shape != b.shape:
        raise ValueError(f"{an} {a.shape} and {bn} {b.shape} differ in shape")
    return a, b


# ---------------------------------------------------------------------------
# edge terms
# ---------------------------------------------------------------------------

def sobel_edge_map(img, direction: str) -> np.ndarray:
    """Sobel response of a single-channel raster in ``x``, ``y``, ``xy`` or ``yx``."""
    if direction not in SOBEL_KERNELS:
        raise ValueError(f"unknown Sobel direction {direction!r}")
    return convolve2d(img, SOBEL_KERNELS[direction])


def _foreedge(pred: np.ndarray, m: np.ndarray, want_grad: bool):
    x = _luma(pred) * m
    hw = x.size
    total = 0.0
    gx = np.zeros_like(x) if want_grad else None
    for k in SOBEL_KERNELS.values():
        r = convolve2d(x, k)
        total += np.abs(r).sum()
        if want_grad:
            gx += convolve2d_adjoint(np.sign(r), k)
    value = -total / hw
    if not want_grad:
        return value, None
    return value, _luma_adjoint(-gx * m / hw, pred.shape[0])


def foreground_edge_loss(pred, m) -> float:
    """Negative mean L1 Sobel energy of the masked luma (always <= 0)."""
    pred = as_image(pred, "pred")
    return _foreedge(pred, _mask(m, pred.shape[1:]), False)[0]


def _edgediff(inp, pred, m, want_grad: bool):
    fp, gp = _foreedge(pred, m, want_grad)
    fi, _ = _foreedge(inp, m, False)
    d = abs(fp) - abs(fi)
    value = abs(d)
    if not want_grad:
        return value, None
    # |fp| = -fp since fp <= 0
    return value, np.sign(d) * -gp


def edge_difference_loss(inp, pred, m) -> float:
    """Absolute gap between the foreground edge energies of ``pred`` and ``inp``."""
    inp, pred = _pair(inp, pred, "input", "pred")
    return _edgediff(inp, pred, _mask(m, pred.shape[1:]), False)[0]


def _tv_grad_plane(x: np.ndarray) -> np.ndarray:
    g = np.zeros_like(x)
    sv = np.sign(x[1:, :] - x[:-1, :])
    sh = np.sign(x[:, 1:] - x[:, :-1])
    g[1:, :] += sv
    g[:-1, :] -= sv
    g[:, 1:] += sh
    g[:, :-1] -= sh
    return g


def _backblur(pred, m, want_grad: bool):
    keep = 1.0 - m
    x = _luma(pred) * keep
    tv = np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(x, axis=1)).sum()
    value = tv / x.size
    if not want_grad:
        return value, None
    return value, _luma_adjoint(_tv_grad_plane(x) * keep / x.size, pred.shape[0])


def background_blur_loss(pred, m) -> float:
    """Anisotropic total variation of the background luma, per pixel."""
    pred = as_image(pred, "pred")
    return _backblur(pred, _mask(m, pred.shape[1:]), False)[0]


# ---------------------------------------------------------------------------
# reconstruction terms
# ---------------------------------------------------------------------------

def _l1(pred, target, want_grad):
    diff = pred - target
    value = float(np.abs(diff).mean())
    return value, (np.sign(diff) / diff.size if want_grad else None)


def l1_loss(pred, target) -> float:
    pred, target = _pair(pred, target)
    return _l1(pred, target, False)[0]


def _masked_l1(pred, target, m, background, want_grad):
    w = 1.0 - m if background else m
    mass = max(float(w.sum()), MASK_EPS)
    diff = pred - target
    per_channel = (np.abs(diff) * w).sum(axis=(1, 2)) / mass
    value = float(per_channel.mean())
    if not want_grad:
        return value, None
    return value, np.sign(diff) * w / (mass * pred.shape[0])


def masked_l1_loss(pred, target, m, background: bool = False) -> float:
    """Mask-weighted mean absolute error, normalised by the mask mass.

    With ``background=True`` the complement ``1 - m`` is used instead.
    """
    pred, target = _pair(pred, target)
    return _masked_l1(pred, target, _mask(m, pred.shape[1:]), background, False)[0]


def ssim_loss(pred, target, params: SsimParams | None = None) -> float:
    pred, target = _pair(pred, target)
    return 1.0 - ssim_with_grad(pred, target, params, want_grad=False)[0]


def _soft_hist(v: np.ndarray, bins: int):
    """Triangular soft binning of ``v`` onto ``bins`` centres spanning [0, 1].

    Returns the normalised histogram and, per value, the lower bin index and
    its fractional position towards the next centre.
    """
    step = 1.0 / (bins - 1)
    t = np.clip(v, 0.0, 1.0) / step
    lo = np.minimum(np.floor(t).astype(np.intp), bins - 2)
    frac = t - lo
    hist = (np.bincount(lo.ravel(), (1 - frac).ravel(), minlength=bins)
            + np.bincount(lo.ravel() + 1, frac.ravel(), minlength=bins))
    return hist / v.size, lo, frac


def _hist(pred, target, bins, want_grad):
    if pred.shape[0] != 3:
        raise ValueError(f"histogram loss needs RGB input, got {pred.shape[0]} channel(s)")
    if bins < 2:
        raise ValueError("need at least two bins")
    step = 1.0 / (bins - 1)
    value = 0.0
    grad = np.zeros_like(pred) if want_grad else None
    for c in range(3):
        hp, lo, _ = _soft_hist(pred[c], bins)
        ht, _, _ = _soft_hist(target[c], bins)
        s = np.sign(hp - ht)
        value += float(np.abs(hp - ht).sum())
        if want_grad:
            inside = (pred[c] > 0.0) & (pred[c] < 1.0)
            grad[c] = (s[lo + 1] - s[lo]) / step / pred[c].size * inside
    return value, grad


def histogram_loss(pred, target, bins: int = DEFAULT_BINS) -> float:
    """Sum over R, G, B of the L1 distance between soft colour histograms."""
    pred, target = _pair(pred, target)
    return _hist(pred, target, bins, False)[0]


# ---------------------------------------------------------------------------
# composite
# ---------------------------------------------------------------------------

def pretrain_loss(inp, pred, target, m, weights: LossWeights | None = None):
    """Weighted pre-training objective.

    Returns ``(total, terms)`` where ``terms`` maps each tag to its unweighted
    value.
    """
    w = weights or LossWeights()
    inp, pred = _pair(inp, pred, "input", "pred")
    pred, target = _pair(pred, target)
    m = _mask(m, pred.shape[1:])
    terms = {
        "l1": _l1(pred, target, False)[0],
        "ssim": 1.0 - ssim_with_grad(pred, target, want_grad=False)[0],
        "edgediff": _edgediff(inp, pred, m, False)[0],
        "backblur": _backblur(pred, m, False)[0],
        "foreedge": _foreedge(pred, m, False)[0],
    }
    total = (w.alpha * terms["l1"] + w.zeta * terms["ssim"] + w.kappa * terms["edgediff"]
             + w.mu * terms["backblur"] + w.nu * terms["foreedge"])
    return total, terms


# ---------------------------------------------------------------------------
# tag dispatch
# ---------------------------------------------------------------------------

def _ctx_mask(pred, ctx):
    return _mask(ctx["mask"], pred.shape[1:])


def _ctx_other(pred, ctx, key):
    other = as_image(ctx[key], key)
    if other.shape != pred.shape:
        raise ValueError(f"{key} {other.shape} does not match pred {pred.shape}")
    return other


def _eval_term(tag, pred, ctx, want_grad):
    if tag == "l1":
        return _l1(pred, _ctx_other(pred, ctx, "target"), want_grad)
    if tag == "ssim":
        v, g = ssim_with_grad(pred, _ctx_other(pred, ctx, "target"), want_grad=want_grad)
        return 1.0 - v, (-g if want_grad else None)
    if tag == "foreedge":
        return _foreedge(pred, _ctx_mask(pred, ctx), want_grad)
    if tag == "edgediff":
        return _edgediff(_ctx_other(pred, ctx, "input"), pred, _ctx_mask(pred, ctx), want_grad)
    if tag == "backblur":
        return _backblur(pred, _ctx_mask(pred, ctx), want_grad)
    if tag == "hist":
        return _hist(pred, _ctx_other(pred, ctx, "target"), ctx.get("bins", DEFAULT_BINS), want_grad)
    if tag in ("masked_l1_fg", "masked_l1_bg"):
        return _masked_l1(pred, _ctx_other(pred, ctx, "target"), _ctx_mask(pred, ctx),
                          tag == "masked_l1_bg", want_grad)
    if tag == "pretrain":
        w = ctx.get("weights") or LossWeights()
        parts = (("l1", w.alpha), ("ssim", w.zeta), ("edgediff", w.kappa),
                 ("backblur", w.mu), ("foreedge", w.nu))
        total, grad = 0.0, (np.zeros_like(pred) if want_grad else None)
        for sub, wt in parts:
            v, g = _eval_term(sub, pred, ctx, want_grad)
            total += wt * v
            if want_grad:
                grad += wt * g
        return total, grad
    raise KeyError(f"unknown loss term {tag!r}; expected one of {', '.join(LOSS_TERMS)}")


LOSS_TERMS = ("l1", "ssim", "foreedge", "edgediff", "backblur", "hist",
              "masked_l1_fg", "masked_l1_bg", "pretrain")


def loss_value(tag: str, pred, context: dict) -> float:
    """Evaluate the loss ``tag`` at ``pred``.

    ``context`` carries the other inputs by name: ``target``, ``input``,
    ``mask``, and optionally ``bins`` and ``weights``.
    """
    return float(_eval_term(tag, as_image(pred, "pred"), context, False)[0])


def loss_gradient(tag: str, pred, context: dict) -> np.ndarray:
    """Analytic gradient of ``loss_value(tag, pred, context)`` w.r.t. ``pred``."""
    return _eval_term(tag, as_image(pred, "pred"), context, True)[1]


def finite_diff_gradient(tag: str, pred, context: dict, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient, one pixel at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = as_image(pred, "pred").copy()
    grad = np.zeros_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = _eval_term(tag, p, context, False)[0]
        flat[i] = orig - eps
        down = _eval_term(tag, p, context, False)[0]
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


# ---------------------------------------------------------------------------
# kink distance
# ---------------------------------------------------------------------------

def _edge_margin(img, m):
    x = _luma(img) * m
    # one pixel step of size t moves a response by at most |kernel|_1 * t
    return min(np.abs(convolve2d(x, k)).min() / np.abs(k).sum() for k in SOBEL_KERNELS.values())


def kink_margin(tag: str, pred, context: dict) -> float:
    """Lower bound on how far any single pixel of ``pred`` can move before
    the loss ``tag`` crosses a non-differentiable point.

    Used to select verification inputs that keep finite differences away
    from ties.
    """
    pred = as_image(pred, "pred")
    if tag in ("l1", "masked_l1_fg", "masked_l1_bg"):
        return float(np.abs(pred - as_image(context["target"])).min())
    if tag == "ssim":
        return np.inf
    m = _ctx_mask(pred, context)
    n = pred.shape[1] * pred.shape[2]
    if tag == "foreedge":
        return float(_edge_margin(pred, m))
    if tag == "edgediff":
        inp = as_image(context["input"])
        gap = abs(abs(_foreedge(pred, m, False)[0]) - abs(_foreedge(inp, m, False)[0]))
        # a pixel step t changes the edge energy by at most 4 * 8 * t / n
        return float(min(_edge_margin(pred, m), gap * n / 32.0))
    if tag == "backblur":
        x = _luma(pred) * (1.0 - m)
        d = min(np.abs(np.diff(x, axis=0)).min(), np.abs(np.diff(x, axis=1)).min())
        return float(d / 2.0)
    if tag == "hist":
        bins = context.get("bins", DEFAULT_BINS)
        step = 1.0 / (bins - 1)
        target = as_image(context["target"])
        pos = pred / step
        centre_gap = float(np.abs(pos - np.round(pos)).min() * step)
        hist_gap = np.inf
        for c in range(3):
            hp = _soft_hist(pred[c], bins)[0]
            ht = _soft_hist(target[c], bins)[0]
            d = np.abs(hp - ht)
            live = (hp > 0) | (ht > 0)
            if live.any():
                # a pixel step t moves a bin by at most t / (step * n)
                hist_gap = min(hist_gap, float(d[live].min() * step * n))
        return min(centre_gap, hist_gap)
    if tag == "pretrain":
        return min(kink_margin(t, pred, context) for t in ("l1", "foreedge", "edgediff", "backblur"))
    raise KeyError(f"unknown loss term {tag!r}")
