"""Counter-based Gaussian noise streams.

Each (seed, stream) pair keys an independent Philox counter-based stream,
so per-chain streams never interact: adding chains cannot perturb the
noise any existing chain sees. Step n of stream s is a deterministic
function of (seed, s, n), which also allows random access.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

__all__ = ["NoiseSource"]

_INV_2_53 = 2.0 ** -53


class NoiseSource:
    """Seeded stream of i.i.d. standard normal d-vectors.

    Words are drawn from Philox(key=(seed, stream)); each step consumes a
    whole number of 128-bit counter blocks, and normals are produced by
    applying the inverse normal CDF to 53-bit uniforms. Identical
    (seed, stream, step) always yields identical vectors.
    """

    def __init__(self, seed, d, stream=0):
        self.seed = int(seed)
        self.d = int(d)
        self.stream = int(stream)
        # whole 4-word blocks per step so step offsets are counter offsets
        self._blocks_per_step = (self.d + 3) // 4

    def _key(self):
        return np.array([self.seed, self.stream], dtype=np.uint64)

    def _raw_words(self, start_step, n_steps):
        bit_gen = Philox(key=self._key())
        bit_gen.advance(start_step * self._blocks_per_step)
        words = bit_gen.random_raw(4 * self._blocks_per_step * n_steps)
        return words.reshape(n_steps, 4 * self._blocks_per_step)[:, : self.d]

    def block(self, start_step, n_steps):
        """Normal vectors for steps start_step..start_step+n_steps-1, shape (n_steps, d)."""
        if n_steps <= 0:
            return np.zeros((0, self.d))
        words = self._raw_words(start_step, n_steps)
        u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53
        return ndtri(u)

    def normals(self, step):
        """The d-vector of step `step` (random access)."""
        return self.block(step, 1)[0]

    def for_chain(self, chain):
        """Stream for a given chain index, derived from the same master seed."""
        return NoiseSource(self.seed, self.d, stream=chain)
