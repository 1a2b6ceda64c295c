"""Named, counter-based random substreams derived from one 64-bit seed.

Every consumer asks for a generator keyed by ``(seed, *names)``. Keys are
stable across processes, so a frame simulated in a worker draws exactly the
same numbers as the same frame simulated serially.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_part(name: int | str) -> int:
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError("substream keys must be non-negative")
        return int(name)
    digest = hashlib.blake2b(str(name).encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *names: int | str) -> np.random.Generator:
    """Philox generator for the substream ``names`` of ``seed``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_part(n) for n in names))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed: int, *names: int | str) -> int:
    """A child 64-bit seed, for handing whole sub-tasks their own root seed."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_part(n) for n in names))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
