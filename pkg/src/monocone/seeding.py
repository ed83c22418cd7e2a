"""Deterministic named random sub-streams.

All randomness in the library flows from a single root seed.  Components
derive independent generators by name (``"scene"``, ``"noise"``,
``"train"``, ``"ransac"``, ...) so that, e.g., changing the number of
training epochs never perturbs scene generation.
"""

import hashlib

import numpy as np


def _name_key(name) -> int:
    digest = hashlib.sha256(repr(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(root_seed: int, *names) -> int:
    """Derive a child seed from a root seed and a path of stream names."""
    seq = np.random.SeedSequence([int(root_seed)] + [_name_key(n) for n in names])
    return int(seq.generate_state(1, np.uint64)[0])


def substream(root_seed: int, *names) -> np.random.Generator:
    """Return a PCG64 generator for the named sub-stream of ``root_seed``."""
    seq = np.random.SeedSequence([int(root_seed)] + [_name_key(n) for n in names])
    return np.random.Generator(np.random.PCG64(seq))
