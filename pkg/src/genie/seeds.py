"""Deterministic seed substreams.

All randomness in a job flows from one 64-bit root seed. Stages and
per-request streams derive independent generators by hashing string/int
labels into the seed material, so results do not depend on evaluation
order or worker count.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK32 = 0xFFFFFFFF


def _label_words(label: int | str) -> list[int]:
    if isinstance(label, str):
        return [zlib.crc32(label.encode("utf-8")) & _MASK32]
    if label < 0:
        raise ValueError(f"seed labels must be non-negative, got {label}")
    # split arbitrarily large ints into 32-bit words
    words = []
    value = int(label)
    while True:
        words.append(value & _MASK32)
        value >>= 32
        if value == 0:
            return words


def substream(root_seed: int, *labels: int | str) -> np.random.Generator:
    """Return a generator for the named substream of ``root_seed``.

    The same (root_seed, labels) always yields the same stream; distinct
    labels yield statistically independent streams.
    """
    entropy: list[int] = _label_words(root_seed)
    for label in labels:
        entropy.extend(_label_words(label))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(root_seed: int, *labels: int | str) -> int:
    """Collapse a named substream into a plain 63-bit integer seed."""
    entropy: list[int] = _label_words(root_seed)
    for label in labels:
        entropy.extend(_label_words(label))
    words = np.random.SeedSequence(entropy).generate_state(2, np.uint64)
    return int(words[0] ^ (words[1] << 1)) & ((1 << 63) - 1)


def draw_root_seed() -> int:
    """Draw a fresh random 63-bit root seed (used when no --seed is given)."""
    return int(np.random.SeedSequence().entropy) & ((1 << 63) - 1)
