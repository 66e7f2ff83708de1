from __future__ import annotations

import math

import numpy as np

Z95 = 1.959963984540054


def wilson_half_width(count: int, n: int, z: float = Z95) -> float:
    """Half-width of the 95% Wilson score interval for ``count`` successes in ``n``."""
    if n <= 0:
        return float("nan")
    p = count / n
    return z / (1.0 + z * z / n) * math.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n))


def fisher_interval(r: float, n: int, z: float = Z95) -> tuple[float, float]:
    if n <= 3:
        return -1.0, 1.0
    if abs(r) >= 1.0:
        return float(np.sign(r)), float(np.sign(r))
    c = math.atanh(r)
    d = z / math.sqrt(n - 3)
    return math.tanh(c - d), math.tanh(c + d)
