import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_image(rng):
    return rng.random((32, 32, 3)).astype(np.float32)


def rand_image_t(seed, h, w, batch=1, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, h, w, generator=g, dtype=dtype)


def finite_difference_grad(fn, x, coords, eps=1e-6):
    """Central finite differences of a scalar function at chosen coordinates."""
    grads = []
    flat = x.reshape(-1)
    for idx in coords:
        orig = flat[idx].item()
        flat[idx] = orig + eps
        hi = float(fn(x))
        flat[idx] = orig - eps
        lo = float(fn(x))
        flat[idx] = orig
        grads.append((hi - lo) / (2.0 * eps))
    return np.array(grads)


def relative_errors(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def assert_grad_close(analytic, numeric, rtol=1e-3, atol=1e-5):
    """Check analytic vs central-difference gradients at relative error rtol.

    The absolute floor covers near-zero entries where central differences
    bottom out in float64 roundoff; entries of any size are held to rtol.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    gap = np.abs(analytic - numeric)
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    worst = np.argmax(gap - bound)
    assert (gap <= bound).all(), (
        f"gradient mismatch at flat index {worst}: "
        f"analytic={analytic[worst]:.6e} numeric={numeric[worst]:.6e}")
