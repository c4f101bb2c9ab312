"""Seed derivation so that results never depend on task scheduling."""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_entropy(key):
    digest = hashlib.blake2b(repr(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(master_seed, *key):
    """Return a 64-bit seed determined by ``master_seed`` and a stable task key.

    Parameters
    ----------
    master_seed : int
        Unsigned 64-bit master seed.
    *key : hashable with stable ``repr``
        Task identifier, e.g. ``("victim", "deep", 3)``.
    """
    seq = np.random.SeedSequence([int(master_seed) & _MASK64, _key_entropy(key)])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def as_generator(rng):
    """Coerce ``None``, an int seed or a Generator into a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
