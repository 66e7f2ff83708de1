from __future__ import annotations

import numpy as np


def primes_up_to(n: int) -> np.ndarray:
    """Ascending primes ``<= n`` (Eratosthenes, odd-only bitmap)."""
    n = int(n)
    if n < 2:
        return np.zeros(0, dtype=np.int64)
    # is_odd_prime[i] describes 2*i + 1
    size = (n - 1) // 2 + 1
    is_odd_prime = np.ones(size, dtype=bool)
    is_odd_prime[0] = False
    i = 1
    while (2 * i + 1) ** 2 <= n:
        if is_odd_prime[i]:
            p = 2 * i + 1
            is_odd_prime[p * p // 2 :: p] = False
        i += 1
    odd = 2 * np.nonzero(is_odd_prime)[0].astype(np.int64) + 1
    return np.concatenate([np.array([2], dtype=np.int64), odd])


def prime_count(primes: np.ndarray, t) -> np.ndarray:
    """``pi(t)`` for real ``t`` given the prime list (must reach ``t``)."""
    return np.searchsorted(primes, np.floor(np.asarray(t, dtype=float)), side="right")
