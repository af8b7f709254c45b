"""Weight initializers."""

from __future__ import annotations

import numpy as np


def glorot_uniform(shape, rng) -> np.ndarray:
    """Uniform on [-a, a] with variance 2 / (fan_in + fan_out); shape is (out, in)."""
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(shape, rng) -> np.ndarray:
    """Matrix with orthonormal rows or columns (QR of a Gaussian, sign-fixed)."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if rows >= cols else q.T


def relu_bias(n: int, value: float = 0.1) -> np.ndarray:
    return np.full(n, value)
