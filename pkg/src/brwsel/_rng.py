"""Random stream plumbing.

Two mechanisms live here:

* ``derive_rng`` expands a master seed into independent numpy generators keyed
  by integer labels (experiment id, replica block, ...). Adding replicas never
  perturbs the streams of earlier ones.
* Keyed hashing (splitmix64) assigns every tree node a 64-bit key, and every
  random quantity attached to the node is a pure function of that key. Two
  simulations of the same tree seed therefore see the same tree, no matter how
  much of it they explore or in which order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO_M53 = 2.0**-53


def label_id(text: str) -> int:
    """Stable 63-bit integer for a string label (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def derive_rng(seed: int, *labels: int | str) -> np.random.Generator:
    """Generator for the stream addressed by ``(seed, *labels)``."""
    key = tuple(label_id(x) if isinstance(x, str) else int(x) for x in labels)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorised splitmix64 finaliser on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + _GOLDEN
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def root_key(tree_seed: int) -> np.ndarray:
    return splitmix64(np.array([tree_seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))


def key_uniform(keys: np.ndarray, stream: int) -> np.ndarray:
    """Uniform draws in the open interval (0, 1), one per key, for a given stream."""
    salt = splitmix64(np.array([stream], dtype=np.uint64))[0]
    bits = splitmix64(np.asarray(keys, dtype=np.uint64) ^ salt) >> _S11
    return (bits.astype(np.float64) + 0.5) * _TWO_M53


def child_keys(parent_keys: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Keys of all children, grouped by parent in order (child index 1, 2, ...)."""
    counts = np.asarray(counts, dtype=np.int64)
    parents = np.repeat(np.asarray(parent_keys, dtype=np.uint64), counts)
    starts = np.cumsum(counts) - counts
    index = np.arange(parents.size, dtype=np.int64) - np.repeat(starts, counts) + 1
    return splitmix64(parents + index.astype(np.uint64) * _GOLDEN)
