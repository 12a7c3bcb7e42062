"""Counter-based deterministic randomness.

All randomness in the package flows from a single integer seed through
stateless integer hashing, so results are independent of chunking, thread
count and call order.
"""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(x):
    """SplitMix64 finalizer, vectorized over uint64 arrays."""
    x = np.asarray(x, dtype=np.uint64).copy()
    x += _GAMMA
    x ^= x >> np.uint64(30)
    x *= _M1
    x ^= x >> np.uint64(27)
    x *= _M2
    x ^= x >> np.uint64(31)
    return x


def combine(*parts):
    """Hash several uint64 arrays/scalars into one stream (broadcasting)."""
    acc = None
    for p in parts:
        h = mix64(p)
        acc = h if acc is None else mix64(acc ^ h)
    return acc


def hash_points(seed, pts, *tags):
    """Per-row hash of float points (bit-pattern based, hence exact).

    pts: (N, m) float64. tags: extra integer labels mixed in.
    Returns (N,) uint64.
    """
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    bits = pts.view(np.uint64)
    acc = np.full(bits.shape[0], np.uint64(seed), dtype=np.uint64)
    for j in range(bits.shape[1]):
        acc = mix64(acc ^ bits[:, j])
    for t in tags:
        acc = mix64(acc ^ np.uint64(t))
    return acc


def uniform01(u):
    """Map uint64 hashes to floats in [0, 1)."""
    return (np.asarray(u, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def substream(seed, *tags):
    """Derive a child seed from (seed, tags)."""
    acc = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    for t in tags:
        acc = mix64(acc ^ np.uint64(int(t) & 0xFFFFFFFFFFFFFFFF))
    return int(acc)
