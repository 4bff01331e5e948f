"""Deterministic 64-bit LCG used for seeded weights and inputs.

    state_{n+1} = (6364136223846793005 * state_n + 1442695040888963407) mod 2**64

The state is advanced once before the first output.  A uniform float in
[0, 1) is the top 24 bits of the state divided by 2**24; a byte is the top
8 bits.  Streams are generated in vectorized chunks by precomputing the
affine jump for every offset inside a chunk.
"""

from __future__ import annotations

import numpy as np

MULTIPLIER = 6364136223846793005
INCREMENT = 1442695040888963407
_MASK = (1 << 64) - 1
_CHUNK = 4096


def _jump_tables(n: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.empty(n, dtype=np.uint64)
    c = np.empty(n, dtype=np.uint64)
    am, cm = 1, 0
    for i in range(n):
        am = (am * MULTIPLIER) & _MASK
        cm = (cm * MULTIPLIER + INCREMENT) & _MASK
        a[i], c[i] = am, cm
    return a, c


_A, _C = _jump_tables(_CHUNK)


class Lcg:
    def __init__(self, seed: int) -> None:
        self.state = seed & _MASK

    def states(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        pos = 0
        with np.errstate(over="ignore"):
            while pos < n:
                m = min(_CHUNK, n - pos)
                s = np.uint64(self.state)
                out[pos:pos + m] = _A[:m] * s + _C[:m]
                self.state = int(out[pos + m - 1])
                pos += m
        return out

    def uniform(self, n: int) -> np.ndarray:
        """float64 values in [0, 1) with 24-bit resolution."""
        return (self.states(n) >> np.uint64(40)).astype(np.float64) / float(1 << 24)

    def bytes(self, n: int) -> np.ndarray:
        return (self.states(n) >> np.uint64(56)).astype(np.uint8)

    def scalar_next(self) -> int:
        """Advance one step in pure Python (for cross-checking ``states``)."""
        self.state = (self.state * MULTIPLIER + INCREMENT) & _MASK
        return self.state
