"""Namespaced random streams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def sub_seed(seed: int, namespace: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(namespace.encode("utf-8"))])


def derive_rng(seed: int, namespace: str) -> np.random.Generator:
    """Independent generator for ``namespace``; identical (seed, namespace) give identical streams."""
    return np.random.default_rng(sub_seed(seed, namespace))
