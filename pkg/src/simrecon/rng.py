"""Reproducible counter-based random streams.

Every random draw in this package comes from Philox-4x64 with 10 rounds (the
Random123 counter-based generator, here via ``numpy.random.Philox``), keyed by
a ``(seed, stream)`` pair. The exact construction is a wire-level contract so
that an implementation in any language can reproduce identical draws:

* key = two 64-bit words ``(seed mod 2**64, stream mod 2**64)``.
* raw output ``m`` (m = 0, 1, 2, ...) is word ``m mod 4`` of the Philox block
  whose 256-bit counter equals ``m // 4`` (counter starts at zero).
* uniform ``m`` is ``((raw_m >> 11) + 1) * 2**-53``, a double in ``(0, 1]``.
* normals come from the Box-Muller transform on consecutive uniform pairs:
  ``z[2i]   = sqrt(-2 ln u[2i]) * cos(2 pi u[2i+1])``
  ``z[2i+1] = sqrt(-2 ln u[2i]) * sin(2 pi u[2i+1])``

Matching another implementation bit-for-bit at f32 precision only requires
agreeing on the raw Philox stream and the three formulas above.

Stream ids are assigned once, below, so that a single user seed can drive
every consumer without overlap.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Philox

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi

# Global stream-id assignments. Restart r of an optimization run owns stream
# STREAM_OPT_RESTART + r, so everything below 16 is reserved for fixed roles.
STREAM_EMBEDDER = 0
STREAM_NOISE = 1
STREAM_OPT_MAIN = 2
STREAM_OPT_RESTART = 16


class RandomStream:
    """Sequential draws from one (seed, stream) Philox keyed stream."""

    def __init__(self, seed: int, stream: int):
        self.seed = seed & _MASK64
        self.stream = stream & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bitgen = Philox(key=key)
        self._carry: float | None = None  # sine half of an odd Box-Muller pair

    def raw(self, n: int) -> np.ndarray:
        """Next `n` raw uint64 outputs of the keyed Philox stream."""
        return self._bitgen.random_raw(n)

    def uniforms(self, n: int) -> np.ndarray:
        """Next `n` doubles in (0, 1], 53-bit mantissa mapping."""
        return ((self.raw(n) >> np.uint64(11)) + np.uint64(1)) * 2.0**-53

    def normals(self, n: int) -> np.ndarray:
        """Next `n` standard normals via Box-Muller on uniform pairs."""
        out = np.empty(n, dtype=np.float64)
        start = 0
        if self._carry is not None and n > 0:
            out[0] = self._carry
            self._carry = None
            start = 1
        m = n - start
        if m <= 0:
            return out
        pairs = (m + 1) // 2
        u = self.uniforms(2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = _TWO_PI * u[1::2]
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        out[start:] = z[:m]
        if m % 2 == 1:
            self._carry = float(z[m])
        return out
