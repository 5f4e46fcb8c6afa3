"""Deterministic seed derivation: one root seed, independent streams per key path."""

from __future__ import annotations

import zlib

import numpy as np


def _key_words(keys) -> list[int]:
    out = []
    for k in keys:
        if isinstance(k, int) and not isinstance(k, bool) and k >= 0:
            out.append(k)
        else:
            out.append(zlib.crc32(str(k).encode("utf-8")))
    return out


def derive_seed(root: int, *keys: str | int) -> int:
    """A 63-bit seed that depends only on ``root`` and the key path."""
    ss = np.random.SeedSequence([root & 0xFFFFFFFFFFFFFFFF, *_key_words(keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & (2**63 - 1)


def make_rng(root: int, *keys: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
