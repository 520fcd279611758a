"""Named deterministic random streams.

Every random draw in the project comes from a generator keyed by
(seed, purpose-label, *indices), so results are reproducible across
platforms and independent of call order.
"""

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def named_rng(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Generator determined entirely by (seed, label, indices)."""
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _label_key(label), *[int(i) for i in indices]])
    return np.random.Generator(np.random.Philox(seq))
