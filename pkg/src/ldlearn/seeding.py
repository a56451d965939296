"""Seed management.

Every source of randomness in a run is derived from one root seed through
named substreams, so changing e.g. the augmentation stream cannot perturb
the initialization stream.  Batch-level streams additionally fold in the
batch index, which makes data production reproducible no matter how many
workers produce batches.
"""

import hashlib

import numpy as np

# Canonical substream names used across the package.
STREAM_DATA = "data"
STREAM_INIT = "init"
STREAM_AUGMENT = "augment"
STREAM_TTA = "tta"


def _name_code(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def substream(root_seed: int, *names, index: int | None = None) -> np.random.Generator:
    """Return a generator for the substream identified by ``names`` (+ index)."""
    entropy = [int(root_seed)] + [_name_code(str(n)) for n in names]
    if index is not None:
        entropy.append(int(index))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def substream_seed(root_seed: int, *names, index: int | None = None) -> int:
    """A 63-bit integer seed for libraries that take a plain seed (torch)."""
    rng = substream(root_seed, *names, index=index)
    return int(rng.integers(0, 2**63 - 1))
