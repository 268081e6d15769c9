"""splitmix64 seeding and a lane-parallel xoshiro256++ generator.

``Xoshiro256pp`` runs ``LANES`` independent xoshiro256++ states side by side
(numpy uint64 vectors). Lane ``j`` is seeded with splitmix64 outputs
``4j .. 4j+3`` of the stream started at the seed. One step of the generator
yields one value per lane; a request for ``n`` values takes ``ceil(n/LANES)``
steps and returns the step outputs in order (step-major, lane-minor),
discarding any surplus of the final step. The output is therefore a pure
function of the seed and the sequence of request sizes.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
LANES = 1024

_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (the state is advanced first)."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_stream(seed: int, n: int) -> np.ndarray:
    """The first ``n`` splitmix64 outputs for a generator seeded with ``seed``."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def image_seed(base_seed: int, index: int) -> int:
    return splitmix64((base_seed ^ index) & MASK64)


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Xoshiro256pp:
    def __init__(self, seed: int, lanes: int = LANES):
        words = splitmix64_stream(seed, 4 * lanes).reshape(lanes, 4)
        # an all-zero state is a fixed point; splitmix64 makes it practically impossible
        self._s = [np.ascontiguousarray(words[:, i]) for i in range(4)]
        self.lanes = lanes

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        result = _rotl(s0 + s3, 23) + s0
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def next_u64(self, n: int) -> np.ndarray:
        steps = -(-n // self.lanes)
        with np.errstate(over="ignore"):
            out = np.empty((steps, self.lanes), dtype=np.uint64)
            for i in range(steps):
                out[i] = self._step()
        return out.reshape(-1)[:n]

    def random(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on [0, 1) with 53-bit resolution."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self) -> float:
        return float(self.random(1)[0])

    def choice(self, options):
        return options[min(int(self.uniform() * len(options)), len(options) - 1)]

    def bernoulli(self, p: float, n: int) -> np.ndarray:
        return self.random(n) < p

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller, two per pair of uniforms."""
        m = -(-n // 2)
        u = self.random(2 * m)
        radius = np.sqrt(-2.0 * np.log1p(-u[:m]))
        angle = 2.0 * np.pi * u[m:]
        return np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")
