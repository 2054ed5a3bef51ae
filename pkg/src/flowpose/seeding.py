"""Deterministic RNG streams derived from one root seed.

Every stochastic stage pulls its generator from :func:`derive_rng` with a
purpose label, so independent stages never share or race a stream and a run
is reproducible from the root seed alone.  Labels are hashed with SHA-256,
not Python's ``hash``, so derivation is stable across processes.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed_sequence(root_seed: int, label: str) -> np.random.SeedSequence:
    """Build a SeedSequence for ``label`` under ``root_seed``."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.SeedSequence(entropy=int(root_seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(words))


def derive_rng(root_seed: int, label: str) -> np.random.Generator:
    """Named sub-stream generator: same (seed, label) -> same stream."""
    return np.random.default_rng(derive_seed_sequence(root_seed, label))
