"""Deterministic derivation of named randomness streams from one master seed.

Every source of randomness in an experiment (data shuffling, parameter init,
attack starts, mask draws, diffusion noise) pulls its seed from
:func:`derive_seed` with a distinct name path, so runs are reproducible and
individual streams can be replayed in isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

# torch.Generator seeds must fit in a signed 64-bit int
_SEED_SPACE = 2**63 - 1


def derive_seed(master_seed: int, *names) -> int:
    """Derive a child seed from ``master_seed`` and a path of names.

    Stable across processes and platforms (SHA-256 based, no Python hash
    randomization involved).
    """
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "big") % _SEED_SPACE


def numpy_rng(master_seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *names))


def torch_generator(master_seed: int, *names) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(master_seed, *names))
    return gen


def sample_seed(master_seed: int, sample_id) -> int:
    """Per-sample seed used for trace-auditable purification noise."""
    return derive_seed(master_seed, "sample", sample_id)
