"""Planted additive co-clustering data for tests and demos."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .matrix import SparseMatrix
from .stencil import Stencil, StencilModel


def circulant_template(k: int, shift: int = 0) -> np.ndarray:
    """k x k circulant built from linspace(-1, 1, k): rows (and columns) pairwise equidistant."""
    base = np.linspace(-1.0, 1.0, k) if k > 1 else np.ones(1)
    idx = (np.arange(k)[:, None] + np.arange(k)[None, :] + shift) % k
    return base[idx]


def planted_model(m: int, n: int, k: int = 3, amplitudes: Sequence[float] = (2.0, 0.5),
                  seed: int = 0) -> StencilModel:
    """Sum of stencils with uniformly random labels and scaled circulant templates."""
    rng = np.random.default_rng(seed)
    stencils = []
    for l, amp in enumerate(amplitudes):
        c = rng.integers(0, k, m)
        d = rng.integers(0, k, n)
        T = amp * circulant_template(k)[rng.permutation(k)]
        stencils.append(Stencil(T, c, d))
    return StencilModel(tuple(stencils), m, n)


def planted_matrix(m: int, n: int, k: int = 3, amplitudes: Sequence[float] = (2.0, 0.5),
                   noise: float = 0.0, seed: int = 0, density: float = 1.0,
                   truth: Optional[StencilModel] = None):
    """Return ``(SparseMatrix, planted StencilModel)``; ``density`` < 1 drops cells at random."""
    truth = truth if truth is not None else planted_model(m, n, k, amplitudes, seed)
    rng = np.random.default_rng([seed, 1])
    M = truth.dense() + noise * rng.standard_normal((m, n))
    mask = rng.random((m, n)) < density if density < 1 else np.ones((m, n), bool)
    return SparseMatrix.from_dense(M, mask=mask), truth
