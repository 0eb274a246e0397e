import numpy as np
import pytest


def shift_replicate(a, dy, dx):
    """``b[y, x] = a[y - dy, x - dx]`` with edge replication outside ``a``."""
    h, w = a.shape[-2:]
    yy = np.clip(np.arange(h) - dy, 0, h - 1)
    xx = np.clip(np.arange(w) - dx, 0, w - 1)
    return a[..., yy[:, None], xx[None, :]]


def textured_noise(rng, h, w, channels=1):
    from scipy.ndimage import gaussian_filter

    planes = [gaussian_filter(rng.random((h, w)), 1.0) for _ in range(channels)]
    img = np.stack(planes)
    return (img - img.min()) / (img.max() - img.min())


def vertical_step():
    return np.array([[[0.0, 0.0, 1.0]] * 3])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
