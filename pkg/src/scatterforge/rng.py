"""Seed mixing and counter-based random substreams.

Every stochastic draw in the package goes through :func:`substream`, which
keys a Philox counter-based generator by ``(seed, *labels)``.  Labels name the
purpose of the draw ("noise", "module", "run-template", ...), so adding a new
consumer never shifts the numbers seen by an existing one.

Stream labels in use:

``"recipe", attempt``          module selection and parameters for one image
``"noise"``                    shot/read noise of one image
``"spot-rotation", digest``    global rotation of a spotted lattice texture
``"run-template", run_id``     per-run parameter sub-ranges
``"split"``                    random train/test split
``"svm", attribute``           coordinate-descent visiting order
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN64 = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer (Steele, Lea & Flood 2014); a bijection on 64 bits."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix64(master_seed: int, index: int) -> int:
    """Per-image seed: ``splitmix64(master_seed XOR golden * index)``."""
    return splitmix64((master_seed & MASK64) ^ ((GOLDEN64 * index) & MASK64))


def _key(seed: int, labels: tuple) -> list[int]:
    h = hashlib.blake2b(digest_size=16)
    h.update((seed & MASK64).to_bytes(8, "little"))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    d = h.digest()
    return [int.from_bytes(d[:8], "little"), int.from_bytes(d[8:], "little")]


def substream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``.

    Philox is counter based, so each key gives its own non-overlapping
    stream regardless of the order in which streams are created.
    """
    key = np.array(_key(int(seed), labels), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
