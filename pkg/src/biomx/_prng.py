"""SplitMix64 pseudo-random stream.

Every source of randomness in biomx (DARE masks, few-shot sampling) is drawn
from this generator so results are reproducible bit-for-bit from a seed.
The k-th output of a stream seeded with ``s`` is ``mix(s + (k + 1) * GAMMA)``,
which makes the stream randomly addressable: blocks can be generated in any
order, or in parallel, without changing a single draw.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix(z):
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def splitmix64(x):
    """First output of a stream seeded with ``x``; used to derive sub-seeds."""
    return _mix((x + GAMMA) & MASK64)


class SplitMix64:
    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self):
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def random(self):
        """Uniform float in [0, 1) built from the top 53 bits of one draw."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def uniform_block(seed, start, count):
    """Draws ``start .. start+count-1`` of the stream seeded with ``seed``, as floats in [0, 1)."""
    seed = int(seed) & MASK64
    with np.errstate(over="ignore"):
        k = np.arange(start + 1, start + count + 1, dtype=np.uint64)
        z = np.uint64(seed) + k * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
