"""Deterministic seed fan-out from one global seed."""
import zlib

import numpy as np


def derive_seed(seed: int, component: str) -> int:
    """Seed for a named component: ``seed XOR crc32(component)``, 32-bit."""
    return (int(seed) ^ zlib.crc32(component.encode("utf-8"))) & 0xFFFFFFFF


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a tuple of integer keys under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
