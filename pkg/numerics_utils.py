"""
Shared numerical plumbing: counter-based RNG streams, low-discrepancy point
sets, sphere sampling and an order-preserving worker pool.
"""

from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum

import numpy as np
from scipy.stats import qmc


class Stream(IntEnum):
    """Fixed stream tags; a stream is keyed by (seed, tag, *counters)"""
    TARGET = 1
    PUSHFORWARD = 2
    REFERENCE = 3
    IS_NODES = 4
    HOLDER_PAIRS = 5
    PROJECTIONS = 6
    TEST_FUNCTIONS = 7
    LOW_DISCREPANCY = 8
    WEIERSTRASS = 9
    ENVELOPE = 10


def stream_rng(seed, tag, *counters):
    """Generator for the stream (seed, tag, *counters).

    Streams are independent of how work is split between workers: the same
    counters always give the same draws.
    """
    key = [int(seed) & 0xFFFFFFFF, int(tag)] + [int(c) for c in counters]
    return np.random.default_rng(np.random.SeedSequence(key))


def low_discrepancy_points(n, dim, lower=-3.0, upper=3.0, seed=0):
    """Scrambled Sobol' points in the box [lower, upper]^dim"""
    sampler = qmc.Sobol(d=dim, scramble=True, seed=stream_rng(seed, Stream.LOW_DISCREPANCY, n, dim))
    m = int(np.ceil(np.log2(max(n, 1))))
    points = sampler.random_base2(m)[:n]
    return qmc.scale(points, np.full(dim, lower), np.full(dim, upper))


def unit_sphere(rng, n, dim):
    """n directions uniform on the unit sphere in R^dim"""
    w = rng.standard_normal((n, dim))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def batch_slices(n, batch_size):
    """Fixed-size index slices covering range(n)"""
    return [slice(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]


def ordered_map(fn, items, threads=1):
    """Apply fn to every item, on a thread pool when threads > 1.

    Results come back in submission order regardless of completion order.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
