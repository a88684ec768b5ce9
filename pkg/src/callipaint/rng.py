"""Named random substreams.

Every randomized operation in this package derives its noise from a root seed
plus a path of names, e.g. ``stream(seed, "z", t, visit)``. Two call sites that
use the same (seed, path) get bit-identical draws, which is what lets the
samplers and the inpainting scheduler share randomness exactly when their
execution paths coincide.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "child_seed"]


def _spawn_key(path: tuple) -> tuple[int, ...]:
    joined = "/".join(str(p) for p in path)
    digest = hashlib.blake2b(joined.encode("utf-8"), digest_size=16).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def stream(seed: int, *path) -> np.random.Generator:
    """Generator for the substream named by ``path`` under ``seed``."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=_spawn_key(path))
    return np.random.Generator(np.random.PCG64(seq))


def child_seed(seed: int, *path) -> int:
    """A derived integer seed, for handing a whole substream to another op."""
    joined = "/".join(str(p) for p in path)
    digest = hashlib.blake2b(
        int(seed).to_bytes(8, "little", signed=True) + b"|" + joined.encode("utf-8"),
        digest_size=8,
    ).digest()
    return int.from_bytes(digest, "little") >> 1
