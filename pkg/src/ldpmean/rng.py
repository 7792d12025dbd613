"""Seeded, reproducible randomness.

Every random object in this library is derived from a 128-bit seed through a
fixed, published scheme, so that a client and a server holding the same seed
realize bit-identical transforms:

* seeds are 16 bytes; integers are accepted and encoded big-endian,
* sub-seeds are derived with BLAKE2b-128 over the parent seed followed by
  length-prefixed labels (domain separation),
* the bit stream behind every generator is numpy's Philox counter-based
  generator keyed by the (derived) 128-bit seed.

Wire-format version byte 1 pins this exact suite.
"""

from __future__ import annotations

import hashlib

import numpy as np

SEED_BYTES = 16


def as_seed(value: int | bytes | bytearray) -> bytes:
    """Coerce an int or byte string to a canonical 16-byte seed."""
    if isinstance(value, (bytes, bytearray)):
        raw = bytes(value)
        if len(raw) != SEED_BYTES:
            raise ValueError(f"seed must be {SEED_BYTES} bytes, got {len(raw)}")
        return raw
    if isinstance(value, (int, np.integer)):
        return int(value).to_bytes(SEED_BYTES, "big", signed=False)
    raise TypeError(f"seed must be int or {SEED_BYTES} bytes, got {type(value)!r}")


def derive_seed(seed: int | bytes, *labels: int | bytes | str) -> bytes:
    """Derive a child seed from ``seed`` and a label path.

    Labels are hashed with explicit length prefixes, so ("ab", "c") and
    ("a", "bc") derive different children.
    """
    h = hashlib.blake2b(digest_size=SEED_BYTES)
    h.update(as_seed(seed))
    for label in labels:
        if isinstance(label, str):
            part = label.encode("utf-8")
        elif isinstance(label, (bytes, bytearray)):
            part = bytes(label)
        elif isinstance(label, (int, np.integer)):
            part = int(label).to_bytes(8, "big", signed=True)
        else:
            raise TypeError(f"unsupported label type {type(label)!r}")
        h.update(len(part).to_bytes(4, "big"))
        h.update(part)
    return h.digest()


def generator(seed: int | bytes, *labels: int | bytes | str) -> np.random.Generator:
    """Philox generator keyed by ``derive_seed(seed, *labels)``."""
    key = derive_seed(seed, *labels) if labels else as_seed(seed)
    return np.random.Generator(np.random.Philox(key=int.from_bytes(key, "big")))


def seed_digest(seed: int | bytes, size: int = 8) -> bytes:
    """Short public digest of a seed, safe to put on the wire."""
    return hashlib.blake2b(as_seed(seed), digest_size=size, person=b"seed-dgst").digest()
