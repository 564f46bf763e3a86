"""
Counter-based random numbers. A draw is a pure function of a seed, a stream
number and a tuple of integer counters (scanline, sample, voxel index,
augmentation index, ...), so that results never depend on the order in which
draws are made or on how work is split over threads.

The hash is the SplitMix64 finalizer applied to the counters one after the
other, vectorized over numpy uint64 arrays (wrap-around arithmetic).
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1
UNIT53 = 1.0 / float(1 << 53)

# stream numbers; every consumer of counter-based draws owns one or more
STREAM_SCATTER_PRESENT = 1
STREAM_SCATTER_AMPLITUDE = 2
STREAM_NOISE = 4
STREAM_AUGMENT = 5
STREAM_PATCH = 6
STREAM_BATCH = 7
STREAM_DATASET = 8
STREAM_TRANSFER = 9


def as_u64(x) -> np.ndarray:
    """Reduce Python or numpy integers modulo 2**64 to uint64."""
    a = np.asarray(x)
    if a.dtype == np.uint64:
        return a
    if a.dtype.kind in 'iu':
        return a.astype(np.int64).astype(np.uint64)
    return np.asarray([int(v) & MASK64 for v in np.ravel(a)], dtype=np.uint64).reshape(a.shape)


def mix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over='ignore'):
        z = x + GOLDEN
        z = (z ^ (z >> np.uint64(30))) * MIX1
        z = (z ^ (z >> np.uint64(27))) * MIX2
        return z ^ (z >> np.uint64(31))


def hash_counters(seed: int, stream: int, *counters) -> np.ndarray:
    """64-bit hashes of (seed, stream, counters...); counters broadcast."""
    h = mix64(as_u64(int(seed) & MASK64))
    h = mix64(h ^ as_u64(int(stream)))
    for c in counters:
        h = mix64(h ^ as_u64(c))
    return h


def counter_uniform(seed: int, stream: int, *counters) -> np.ndarray:
    """Uniform float64 draws in [0, 1), one per broadcast counter tuple."""
    h = hash_counters(seed, stream, *counters)
    return (h >> np.uint64(11)).astype(np.float64) * UNIT53


def counter_normal(seed: int, stream: int, *counters) -> np.ndarray:
    """Standard normal draws (Box-Muller on two counter-based uniforms)."""
    u1 = 1.0 - counter_uniform(seed, stream, *counters, 0)
    u2 = counter_uniform(seed, stream, *counters, 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def sequential_rng(seed: int, *index) -> np.random.Generator:
    """A numpy Generator for draws that are naturally sequential (network
    initialization), seeded from the seed and an index path."""
    return np.random.default_rng([int(seed) & MASK64] + [int(i) & MASK64 for i in index])
