"""Reproducible seeded draws.

Bits come from Philox4x64-10 (NumPy's ``Philox``) keyed with ``(seed, 0)``,
counter starting at zero, consuming 64-bit outputs in order. Everything on
top of the raw stream is spelled out here so another implementation can
regenerate the same fixtures from a seed:

* uniform in [0, 1):   ``(u >> 11) * 2**-53``
* uniform in (0, 1]:   ``((u >> 11) + 1) * 2**-53``
* standard normal:     Box-Muller on consecutive pairs ``(u1 in (0,1], u2 in [0,1))``
                       giving ``r*cos(2*pi*u2), r*sin(2*pi*u2)`` with ``r = sqrt(-2 ln u1)``
* log-normal:          random sign times ``exp(sigma * z)``
"""

from __future__ import annotations

import math

import numpy as np

from fp8flow.errors import ConfigError

SEED_MASK = (1 << 64) - 1
DISTRIBUTIONS = ("normal", "uniform", "lognormal")


def check_seed(seed: int) -> int:
    if not isinstance(seed, (int, np.integer)) or not 0 <= int(seed) <= SEED_MASK:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return int(seed)


def trial_seed(seed: int, trial: int) -> int:
    return (check_seed(seed) + trial) & SEED_MASK


class SeededStream:
    def __init__(self, seed: int):
        self.seed = check_seed(seed)
        self._bits = np.random.Philox(key=self.seed, counter=0)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = math.prod(shape) if isinstance(shape, tuple) else int(shape)
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        n = math.prod(shape) if isinstance(shape, tuple) else int(shape)
        pairs = (n + 1) // 2
        raw = self.raw(2 * pairs).reshape(pairs, 2)
        u1 = ((raw[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).ravel()[:n]
        return (scale * z).reshape(shape)

    def lognormal(self, shape, sigma: float = 1.0) -> np.ndarray:
        mag = np.exp(sigma * self.normal(shape))
        sign = np.where(self.uniform(shape) < 0.5, -1.0, 1.0)
        return sign * mag

    def draw(self, dist: str, shape) -> np.ndarray:
        if dist == "normal":
            return self.normal(shape)
        if dist == "uniform":
            return self.uniform(shape, -1.0, 1.0)
        if dist == "lognormal":
            return self.lognormal(shape, sigma=2.0)
        raise ConfigError(f"unknown distribution {dist!r}; choose from {', '.join(DISTRIBUTIONS)}")
