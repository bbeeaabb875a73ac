"""Counter-based uniforms keyed by (seed, purpose) and addressed by draw index.

Every draw has a global index (for example ``path * n_names + name``); the
value depends only on the seed, the purpose and that index, so any partition
of paths across chunks or workers reproduces the same numbers.
"""
from __future__ import annotations

import zlib

import numpy as np

_WORDS_PER_COUNTER = 4  # Philox4x64 emits four 64-bit words per counter value
_TO_UNIT = 2.0**-53


def purpose_key(seed: int, purpose: str) -> int:
    """128-bit Philox key: purpose hash in the high word, seed in the low word."""
    if not 0 <= seed < 2**64:
        raise ValueError("seed must fit in 64 bits")
    return (zlib.crc32(purpose.encode()) << 64) | seed


def uniforms(seed: int, purpose: str, start: int, count: int) -> np.ndarray:
    """Uniforms in [0, 1) for global draw indices ``start .. start + count - 1``."""
    if count <= 0:
        return np.empty(0)
    bg = np.random.Philox(key=purpose_key(seed, purpose))
    block, offset = divmod(start, _WORDS_PER_COUNTER)
    if block:
        bg.advance(block)
    raw = bg.random_raw(offset + count)[offset:]
    return (raw >> np.uint64(11)).astype(np.float64) * _TO_UNIT


def uniform_matrix(seed: int, purpose: str, row_start: int, rows: int, cols: int) -> np.ndarray:
    """(rows, cols) block where entry (r, c) has global index (row_start + r) * cols + c."""
    return uniforms(seed, purpose, row_start * cols, rows * cols).reshape(rows, cols)


def generator(seed: int, purpose: str, block: int) -> np.random.Generator:
    """A numpy Generator for distributions other than uniform, keyed per fixed block."""
    bg = np.random.Philox(key=purpose_key(seed, purpose))
    bg.advance(block * 2**40)
    return np.random.Generator(bg)
