"""Privacy amplification by Toeplitz hashing."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import fftconvolve

from .cascade import QBER_LIMIT

SECURITY_MARGIN = 64


def binary_entropy(q: float) -> float:
    if q <= 0 or q >= 1:
        return 0.0
    return -q * math.log2(q) - (1 - q) * math.log2(1 - q)


def secure_length(n: int, qber: float, leaked: int, margin: int = SECURITY_MARGIN) -> int:
    """Amplified key length; zero at or above the BBM92 QBER limit."""
    if not qber < QBER_LIMIT:
        return 0
    return max(0, math.floor(n * (1.0 - binary_entropy(qber)) - leaked - margin))


def toeplitz_hash(bits: np.ndarray, m: int, seed_bits: np.ndarray) -> np.ndarray:
    """Multiply ``bits`` (length n) by the m x n binary Toeplitz matrix T[i, j] = s[i - j + n - 1]."""
    x = np.asarray(bits, np.uint8)
    n = len(x)
    s = np.asarray(seed_bits, np.uint8)
    if len(s) != n + m - 1:
        raise ValueError("seed must have n + m - 1 bits")
    if m == 0 or n == 0:
        return np.zeros(m, np.uint8)
    full = fftconvolve(s.astype(float), x.astype(float))
    return (np.rint(full[n - 1:n - 1 + m]).astype(np.int64) & 1).astype(np.uint8)


def privacy_amplify(key: np.ndarray, qber: float, leaked: int, rng: np.random.Generator,
                    margin: int = SECURITY_MARGIN) -> np.ndarray:
    """Compress a reconciled key to its secure length with a random Toeplitz matrix."""
    n = len(key)
    m = secure_length(n, qber, leaked, margin)
    if m == 0:
        return np.zeros(0, np.uint8)
    seed = rng.integers(0, 2, n + m - 1, dtype=np.uint8)
    return toeplitz_hash(key, m, seed)
