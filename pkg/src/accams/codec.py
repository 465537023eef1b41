"""Uniform-code packing of cluster assignment vectors.

Labels in ``[0, k)`` are grouped into blocks of ``g`` symbols; each block is
the base-``k`` integer of its symbols and takes ``ceil(g * log2 k)`` bits.
For powers of two this is plain ``log2 k``-bit fixed width; for other ``k``
the per-symbol cost approaches ``log2 k`` instead of ``ceil(log2 k)``.
"""
from __future__ import annotations

import math

import numpy as np

MAX_BLOCK_BITS = 62


def block_layout(k: int) -> tuple[int, int]:
    """Symbols per block and bits per block for alphabet size ``k``."""
    if k < 1:
        raise ValueError("alphabet size must be >= 1")
    if k == 1:
        return 1, 0
    lg = math.log2(k)
    if lg == int(lg):
        return 1, int(lg)
    best = None
    for g in range(1, int(MAX_BLOCK_BITS // lg) + 1):
        bits = (k ** g - 1).bit_length()
        rate = bits / g
        if best is None or rate < best[2] - 1e-12:
            best = (g, bits, rate)
    return best[0], best[1]


def packed_bits(n: int, k: int) -> int:
    g, b = block_layout(k)
    return -(-n // g) * b


def packed_nbytes(n: int, k: int) -> int:
    return -(-packed_bits(n, k) // 8)


def pack(labels, k: int) -> bytes:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("label out of range")
    g, b = block_layout(k)
    if b == 0 or labels.size == 0:
        return b""
    n_blocks = -(-labels.size // g)
    padded = np.zeros(n_blocks * g, dtype=np.uint64)
    padded[:labels.size] = labels
    blocks = padded.reshape(n_blocks, g)
    codes = np.zeros(n_blocks, dtype=np.uint64)
    for col in range(g):  # Horner, most significant symbol first
        codes = codes * np.uint64(k) + blocks[:, col]
    shifts = np.arange(b, dtype=np.uint64)
    bits = ((codes[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack(data: bytes, n: int, k: int) -> np.ndarray:
    g, b = block_layout(k)
    if b == 0 or n == 0:
        return np.zeros(n, dtype=np.int64)
    n_blocks = -(-n // g)
    need = -(-(n_blocks * b) // 8)
    if len(data) < need:
        raise ValueError("truncated assignment block")
    bits = np.unpackbits(np.frombuffer(data[:need], dtype=np.uint8), bitorder="little")
    bits = bits[:n_blocks * b].reshape(n_blocks, b).astype(np.uint64)
    codes = (bits << np.arange(b, dtype=np.uint64)[None, :]).sum(axis=1, dtype=np.uint64)
    out = np.empty((n_blocks, g), dtype=np.uint64)
    for col in range(g - 1, -1, -1):
        out[:, col] = codes % np.uint64(k)
        codes = codes // np.uint64(k)
    if np.any(codes):
        raise ValueError("assignment code out of range")
    labels = out.ravel()[:n].astype(np.int64)
    if np.any(out.ravel()[n:]):
        raise ValueError("nonzero padding in assignment block")
    return labels
