import numpy as np
import pytest

from maskfed import vit


def fd_grad(fn, arr, h=1e-5):
    """Independent central-difference oracle: d fn() / d arr, elementwise.

    fn re-evaluates the full forward pass from current array contents;
    arr must be float64 for the 1e-4 relative tolerance to be meaningful.
    """
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def max_rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture
def tiny_cfg():
    return vit.ViTConfig(h=4, w_img=4, p=2, d=8, heads=2, n_t=2, m=1, c=3,
                         channels=1)


@pytest.fixture
def toy_cfg():
    return vit.ViTConfig(h=16, w_img=16, p=4, d=32, heads=4, n_t=4, m=2, c=4,
                         channels=1)
