"""Reusable experiment drivers shared by the acceptance suite and scripts/."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .evaluation import rmse
from .kmeans import FitOptions, fit_accams
from .matrix import SparseMatrix, split_train_test
from .sampler import Hyperparams, fit_baccams
from .stencil import formula_bits


@dataclass
class ComparisonConfig:
    k: int = 10
    s: int = 20
    burn_in: int = 30
    n_samples: int = 20
    test_fraction: float = 0.1
    seed: int = 0
    clamp: Optional[tuple] = None


@dataclass
class SplitResult:
    split_seed: int
    baccams_rmse: float
    cocluster_rmse: float
    mean_rmse: float
    baccams_bits: int
    cocluster_k: int
    cocluster_bits: int
    baccams_seconds: float

    def as_dict(self) -> dict:
        return asdict(self)


def equal_bits_k(m: int, n: int, target_bits: int, bits_per_float: int = 32) -> int:
    """Largest k whose single k x k stencil costs no more than ``target_bits``."""
    k = 1
    while formula_bits(m, n, k + 1, 1, bits_per_float).total_bits <= target_bits:
        k += 1
    return k


def global_mean_rmse(train: SparseMatrix, test: SparseMatrix) -> float:
    err = test.values - train.values.mean()
    return float(np.sqrt(np.mean(err * err)))


def compare_on_split(data: SparseMatrix, split_seed: int, cfg: ComparisonConfig,
                     log=None) -> SplitResult:
    """bACCAMS vs single-stencil co-clustering at equal bits vs the global mean."""
    train, test = split_train_test(data, cfg.test_fraction, split_seed)
    m, n = data.shape
    start = time.perf_counter()
    h = Hyperparams(k_max=cfg.k, s=cfg.s, burn_in=cfg.burn_in, n_samples=cfg.n_samples)
    res = fit_baccams(train, h, seed=cfg.seed + split_seed)
    elapsed = time.perf_counter() - start
    bacc = rmse(res.samples, test, cfg.clamp)
    # the compared size is one posterior state of s stencils with k x k clusters
    target = formula_bits(m, n, cfg.k, cfg.s).total_bits
    k_eq = equal_bits_k(m, n, target)
    single = fit_accams(train, FitOptions(k=k_eq, s=1, seed=cfg.seed + split_seed))
    result = SplitResult(split_seed, bacc, rmse(single, test, cfg.clamp),
                         global_mean_rmse(train, test), target, k_eq,
                         formula_bits(m, n, k_eq, 1).total_bits, elapsed)
    if log is not None:
        log(result)
    return result
