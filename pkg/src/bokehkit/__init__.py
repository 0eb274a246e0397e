"""Bokeh rendering toolkit: losses, metrics, a classical renderer, a tiny
U-Net forward engine and dataset preprocessing."""

from .imaging import load_image, save_image
from .losses import LossWeights, pretrain_loss
from .metrics import challenge_score, ms_ssim, psnr, ssim
from .render import RenderParams, render_bokeh
from .tinynet import NetSpec, unet_forward

__version__ = "0.1.0"

__all__ = [
    "load_image", "save_image", "LossWeights", "pretrain_loss", "challenge_score",
    "ms_ssim", "psnr", "ssim", "RenderParams", "render_bokeh", "NetSpec", "unet_forward",
]
