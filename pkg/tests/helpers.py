"""Shared test utilities: builders and the central-difference oracle."""

from __future__ import annotations

import numpy as np

from gsvideo.gaussians import GaussianSet


def random_set(
    rng: np.random.Generator,
    n: int,
    width: int,
    height: int,
    min_std_px: float = 0.5,
    max_std_px: float = 4.0,
    dtype=np.float64,
) -> GaussianSet:
    """A random Gaussian set with stds (in pixels) drawn from a given range."""
    mu = rng.uniform(0.05, 0.95, size=(n, 2))
    std_x = rng.uniform(min_std_px, max_std_px, size=n) / width
    std_y = rng.uniform(min_std_px, max_std_px, size=n) / height
    l2 = rng.uniform(-0.3, 0.3, size=n) * std_y
    chol = np.stack([std_x, l2, std_y], axis=1)
    color = rng.uniform(-1.0, 1.0, size=(n, 3))
    return GaussianSet(
        mu.astype(dtype), chol.astype(dtype), color.astype(dtype), width, height
    )


def central_diff(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. every entry of arr.

    ``f`` must read ``arr`` (the same object) when called; entries are
    perturbed in place and restored.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (hi - lo) / (2.0 * h)
    return grad


def rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    """max |analytic - fd| / max(1, |fd|), the spec's gradient metric."""
    denom = np.maximum(1.0, np.abs(fd))
    return float(np.max(np.abs(analytic - fd) / denom))


def box_downsample(data: np.ndarray, factor: int) -> np.ndarray:
    """Average factor x factor pixel blocks of an (H, W, C) array."""
    h, w, c = data.shape
    assert h % factor == 0 and w % factor == 0
    return data.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))
