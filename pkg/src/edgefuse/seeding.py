"""Deterministic seed fan-out for every random role in a run.

Seeds derive from (global seed, role string, indices...) so that per-edge,
per-VAE and per-slot randomness is reproducible and independent of execution
order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _entropy(parts) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, str):
            out.append(zlib.crc32(p.encode("utf-8")))
        else:
            out.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    return out


def seed_sequence(*parts) -> np.random.SeedSequence:
    return np.random.SeedSequence(_entropy(parts))


def rng_from(*parts) -> np.random.Generator:
    """Generator keyed by an arbitrary (seed, role, index...) tuple."""
    return np.random.default_rng(seed_sequence(*parts))


def derived_seed(*parts) -> int:
    """A stable 63-bit integer seed derived from the given parts."""
    return int(seed_sequence(*parts).generate_state(1, np.uint64)[0] >> 1)
