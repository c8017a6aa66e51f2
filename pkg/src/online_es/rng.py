"""Counter-based random substreams.

Every worker slot owns a Philox stream keyed by ``(master_seed, index)``.
The key fully determines the stream, so a worker draws the same numbers
whether it lives alone or inside a pool of any size, and pools built from
the same master seed are reproducible regardless of evaluation order.
"""

from __future__ import annotations

import numpy as np

_U64 = 2**64


def substream(master_seed: int, index: int) -> np.random.Generator:
    if not (0 <= master_seed < _U64) or not (0 <= index < _U64):
        raise ValueError("seed and stream index must fit in an unsigned 64-bit integer")
    key = np.array([master_seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def substreams(master_seed: int, n: int, offset: int = 0) -> list[np.random.Generator]:
    return [substream(master_seed, offset + i) for i in range(n)]


def gaussian_noise(rng, sigma: float, d: int) -> np.ndarray:
    """One isotropic draw from N(0, sigma^2 I_d)."""
    return sigma * rng.standard_normal(d)
