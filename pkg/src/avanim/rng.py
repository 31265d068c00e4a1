"""Deterministic seed fan-out.

Every command takes one master seed; all randomness (numpy and torch) is
derived from it through named streams so that adding a consumer never
perturbs the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def child_seed(master_seed: int, stream: str) -> int:
    """Derive a 63-bit seed for a named stream from the master seed."""
    tag = zlib.crc32(stream.encode("utf-8"))
    ss = np.random.SeedSequence([int(master_seed), tag])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def numpy_rng(master_seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(child_seed(master_seed, stream))


def torch_generator(master_seed: int, stream: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(child_seed(master_seed, stream))
    return g
