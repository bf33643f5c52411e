"""
Seeded RNG helpers
Every random stream is derived from (seed, *keys) so results never depend on task scheduling
"""

import hashlib

import numpy as np

# Stream namespaces keep chains, restarts, splits and simulations from sharing draws
STREAM_CHAIN = 1
STREAM_SPLIT = 2
STREAM_SIMULATE = 3
STREAM_INNER_CV = 4
STREAM_PERMUTATION = 5
STREAM_INIT = 6


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Construct a PCG64 generator for the stream identified by (seed, *keys)"""
    sequence = np.random.SeedSequence(entropy=int(seed) % (2 ** 64), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(sequence))


def cell_key(*labels: str) -> int:
    """Stable 32-bit key of a (condition, category) cell"""
    digest = hashlib.sha256("/".join(labels).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def chain_rng(seed: int, chain_id: int, restart: int = 0, repeat: int = 0, cell: int = 0) -> np.random.Generator:
    """Generator of one MCMC chain of one restart within one CV repeat of one cell"""
    return make_rng(seed, STREAM_CHAIN, cell, repeat, restart, chain_id)


def derive_seed(seed: int, *keys: int) -> int:
    """Integer seed for libraries that take an int random_state"""
    return int(make_rng(seed, *keys).integers(0, 2 ** 31 - 1))
