"""Collapsed Gibbs sampling for additive co-clustering (bACCAMS).

Each stencil's row and column partitions carry CRP priors; templates are
integrated out while reassigning entities and instantiated afterwards from
their Normal posterior. Noise and template variances get Inverse-Gamma
updates. Stencils are sampled one at a time against the partial residual of
all other stencils.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import _kernels
from .kmeans import FitOptions, fit_accams
from .matrix import DualIndex, SparseMatrix, build_dual_index
from .stencil import (Stencil, StencilModel, block_sums, deserialize, predict_many,
                      serialize)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class DivergenceError(RuntimeError):
    """The noise-variance rejection sampler exceeded its retry cap."""


@dataclass
class Hyperparams:
    alpha: float = 10.0
    beta: float = 10.0
    eta_a: float = 2.0
    eta_b: float = 0.3
    gamma_a: float = 5.0
    gamma_b: float = 0.3
    sigma_max: float = 1.0
    k_max: int = 10
    s: int = 1
    burn_in: int = 30
    sub_sweeps: int = 3
    n_samples: int = 10
    thin: int = 1
    # per-stencil multiplier on alpha/beta; stencil l uses alpha * decay**l
    concentration_decay: float = 1.0
    max_rejections: int = 1_000_000

    def __post_init__(self):
        for name in ("alpha", "beta", "eta_a", "eta_b", "gamma_a", "gamma_b", "sigma_max",
                     "concentration_decay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("k_max", "s", "burn_in", "sub_sweeps", "n_samples", "thin"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class BlockStats:
    counts: np.ndarray  # n_cd
    sums: np.ndarray    # l_cd
    sumsq: float        # Q

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class StencilState:
    row_assign: np.ndarray
    col_assign: np.ndarray
    template: np.ndarray
    tau2: float

    def values_at(self, rows, cols) -> np.ndarray:
        return self.template[self.row_assign[rows], self.col_assign[cols]]

    def copy(self) -> "StencilState":
        return StencilState(self.row_assign.copy(), self.col_assign.copy(),
                            self.template.copy(), self.tau2)


@dataclass
class SamplerState:
    """Mutable sampler state.

    ``residual`` holds ``M - sum of stencils`` over observed cells, except that
    while stencil ``open`` is being resampled it excludes that stencil.
    """

    data: SparseMatrix
    index: DualIndex
    hyper: Hyperparams
    stencils: List[StencilState]
    sigma2: float
    residual: np.ndarray
    open: Optional[int] = None
    iteration: int = 0

    @classmethod
    def from_model(cls, data: SparseMatrix, model: StencilModel, hyper: Hyperparams,
                   sigma2: Optional[float] = None) -> "SamplerState":
        if (model.n_rows, model.n_cols) != data.shape:
            raise ValueError("model and data dimensions differ")
        stencils = [StencilState(st.row_assign.copy(), st.col_assign.copy(),
                                 st.template.copy(), float(t))
                    for st, t in zip(model.stencils, model.template_variances)]
        if sigma2 is None:
            sigma2 = model.noise_variance
        sigma2 = min(float(sigma2), hyper.sigma_max ** 2)
        state = cls(data, build_dual_index(data), hyper, stencils, sigma2,
                    np.zeros(data.nnz))
        state.resync()
        return state

    @property
    def s(self) -> int:
        return len(self.stencils)

    def stencil_values(self, l: int) -> np.ndarray:
        return self.stencils[l].values_at(self.data.rows, self.data.cols)

    def open_stencil(self, l: int) -> None:
        if self.open is not None:
            raise RuntimeError(f"stencil {self.open} is already open")
        self.residual = self.residual + self.stencil_values(l)
        self.open = l

    def close_stencil(self) -> None:
        if self.open is None:
            raise RuntimeError("no open stencil")
        self.residual = self.residual - self.stencil_values(self.open)
        self.open = None

    def full_residual(self) -> np.ndarray:
        if self.open is None:
            return self.residual
        return self.residual - self.stencil_values(self.open)

    def recompute_residual(self) -> np.ndarray:
        r = self.data.values.copy()
        for l, st in enumerate(self.stencils):
            if l != self.open:
                r -= st.values_at(self.data.rows, self.data.cols)
        return r

    def resync(self) -> float:
        """Recompute the residual cache from scratch; returns the drift it removed."""
        fresh = self.recompute_residual()
        drift = float(np.max(np.abs(fresh - self.residual))) if fresh.size else 0.0
        self.residual = fresh
        return drift

    def concentration(self, l: int, side: str) -> float:
        base = self.hyper.alpha if side == "row" else self.hyper.beta
        return base * self.hyper.concentration_decay ** l

    def to_model(self) -> StencilModel:
        stencils = tuple(Stencil(st.template, st.row_assign, st.col_assign).compact()
                         for st in self.stencils)
        return StencilModel(stencils, self.data.n_rows, self.data.n_cols, self.sigma2,
                            tuple(st.tau2 for st in self.stencils), self.data.row_ids,
                            self.data.col_ids)

    def assignments(self) -> list:
        return [(st.row_assign.copy(), st.col_assign.copy()) for st in self.stencils]


# ---------------------------------------------------------------- closed forms

def crp_assignment_weights(cluster_sizes: Sequence[int], alpha: float, total: int):
    """Conditional CRP probabilities of one held-out entity.

    ``total`` counts every entity including the held-out one. Returns
    (weights for existing clusters, weight for a new cluster).
    """
    sizes = np.asarray(cluster_sizes, dtype=np.float64)
    if int(sizes.sum()) + 1 != total:
        raise ValueError("total must equal the sum of cluster sizes plus one")
    denom = alpha + total - 1
    return sizes / denom, alpha / denom


def block_log_marginal(n_cd: int, total: float, sumsq: float, sigma2: float,
                       tau2: float) -> float:
    """log N(x; 0, sigma2 I + tau2 11^T) from the block's count, sum and sum of squares."""
    if not (sigma2 > 0 and tau2 > 0):
        raise ValueError("variances must be positive")
    if n_cd == 0:
        return 0.0
    denom = sigma2 + n_cd * tau2
    return (-0.5 * (n_cd * LOG_2PI + (n_cd - 1) * math.log(sigma2) + math.log(denom))
            - sumsq / (2.0 * sigma2) + (tau2 / (2.0 * sigma2)) * total * total / denom)


def template_posterior(n_cd, total, sigma2: float, tau2: float):
    """Mean and variance of T_cd given its block's count and sum.

    With shrinkage rho = 1 + sigma2 / (n_cd tau2) the mean is total / (rho n_cd)
    and the variance sigma2 / (rho n_cd); empty blocks give the prior N(0, tau2).
    """
    n_cd = np.asarray(n_cd, dtype=np.float64)
    precision_n = n_cd + sigma2 / tau2  # rho * n_cd
    return np.asarray(total) / precision_n, sigma2 / precision_n


def sample_template_values(n_cd, total, sigma2, tau2, rng) -> np.ndarray:
    mean, var = template_posterior(n_cd, total, sigma2, tau2)
    return rng.normal(mean, np.sqrt(var))


def sample_inverse_gamma(shape: float, scale: float, rng, size=None,
                         upper: Optional[float] = None, max_tries: int = 1_000_000):
    """Inverse-Gamma(shape, scale) draws, optionally rejected until ``<= upper``."""
    if upper is None:
        return scale / rng.gamma(shape, 1.0, size=size)
    want = 1 if size is None else int(np.prod(size))
    kept = np.empty(0)
    tries = 0
    batch = 64 if size is None else max(64, want)
    while kept.size < want:
        if tries >= max_tries:
            raise DivergenceError(f"variance rejection sampler exceeded {max_tries} draws")
        n = min(batch, max_tries - tries)
        draws = scale / rng.gamma(shape, 1.0, size=n)
        tries += n
        kept = np.concatenate([kept, draws[draws <= upper]])
    kept = kept[:want]
    return float(kept[0]) if size is None else kept.reshape(size)


def noise_variance_posterior(state: SamplerState):
    """(shape, scale) of the Inverse-Gamma conditional of sigma^2."""
    r = state.full_residual()
    return state.hyper.eta_a + r.size / 2.0, state.hyper.eta_b + 0.5 * float(r @ r)


def template_variance_posterior(template: np.ndarray, hyper: Hyperparams):
    """(shape, scale) of the Inverse-Gamma conditional of one stencil's tau^2."""
    return (hyper.gamma_a + template.size / 2.0,
            hyper.gamma_b + 0.5 * float(np.sum(template ** 2)))


# ---------------------------------------------------------------- statistics

def _side_arrays(state: SamplerState, l: int, side: str):
    st, idx, data = state.stencils[l], state.index, state.data
    if side == "row":
        return idx.row_ptr, idx.row_entries, data.cols, st.row_assign, st.col_assign
    if side == "col":
        return idx.col_ptr, idx.col_entries, data.rows, st.col_assign, st.row_assign
    raise ValueError(f"side must be 'row' or 'col', got {side!r}")


def _partial(state: SamplerState, l: int) -> np.ndarray:
    if state.open == l:
        return state.residual
    if state.open is None:
        return state.residual + state.stencil_values(l)
    raise RuntimeError(f"stencil {state.open} is open, cannot work on stencil {l}")


def block_stats(state: SamplerState, l: int, cap: Optional[tuple] = None) -> BlockStats:
    """Block counts/sums of the partial residual excluding stencil ``l``."""
    st = state.stencils[l]
    r = _partial(state, l)
    k_m, k_n = cap if cap is not None else st.template.shape
    n, sums = block_sums(state.data.rows, state.data.cols, r, st.row_assign,
                         st.col_assign, k_m, k_n)
    return BlockStats(n, sums, float(r @ r))


def _kernel_inputs(state: SamplerState, l: int, side: str):
    ptr, ent, other, assign, other_assign = _side_arrays(state, l, side)
    st = state.stencils[l]
    k_m, k_n = st.template.shape
    cap_r = max(state.hyper.k_max, k_m)
    cap_c = max(state.hyper.k_max, k_n)
    stats = block_stats(state, l, (cap_r, cap_c))
    n_blk, l_blk = stats.counts.astype(np.int64), stats.sums
    cap = cap_r
    if side == "col":
        n_blk, l_blk = np.ascontiguousarray(n_blk.T), np.ascontiguousarray(l_blk.T)
        cap = cap_c
    sizes = np.bincount(assign, minlength=cap).astype(np.int64)
    return (ptr, ent, other, np.ascontiguousarray(other_assign), _partial(state, l),
            assign.copy(), sizes, n_blk, l_blk)


def assignment_log_weights(state: SamplerState, l: int, side: str, u: int):
    """Unnormalised log weights for entity ``u`` of stencil ``l``.

    Returns ``(clusters, logw)`` where ``clusters`` lists existing labels and,
    when a new cluster is allowed, ``-1`` for it as the last element.
    """
    (ptr, ent, other, other_assign, r, assign, sizes,
     n_blk, l_blk) = _kernel_inputs(state, l, side)
    log_conc = math.log(state.concentration(l, side))
    out, new_slot = _kernels.entity_weights(u, ptr, ent, other, other_assign, r, assign,
                                            sizes, n_blk, l_blk, state.hyper.k_max,
                                            log_conc, state.sigma2,
                                            state.stencils[l].tau2)
    existing = [t for t in range(out.size) if np.isfinite(out[t]) and t != new_slot]
    clusters = existing + ([-1] if new_slot >= 0 else [])
    logw = np.array([out[t] for t in existing] + ([out[new_slot]] if new_slot >= 0 else []))
    return clusters, logw


def assignment_probabilities(state: SamplerState, l: int, side: str, u: int) -> dict:
    """Normalised conditional distribution of entity ``u``'s cluster (``-1`` = new)."""
    clusters, logw = assignment_log_weights(state, l, side, u)
    p = np.exp(logw - logw.max())
    p /= p.sum()
    return dict(zip(clusters, p.tolist()))


# ---------------------------------------------------------------- sampling steps

def _apply_side(state: SamplerState, l: int, side: str, assign: np.ndarray) -> None:
    """Compact slot labels and carry template rows/cols along; new clusters get 0."""
    st = state.stencils[l]
    active = np.unique(assign)
    remap = np.full(max(assign.max() + 1, 1), -1)
    remap[active] = np.arange(active.size)
    T = st.template
    if side == "row":
        new_T = np.zeros((active.size, T.shape[1]))
        old = active < T.shape[0]
        new_T[old] = T[active[old]]
        st.row_assign = remap[assign]
    else:
        new_T = np.zeros((T.shape[0], active.size))
        old = active < T.shape[1]
        new_T[:, old] = T[:, active[old]]
        st.col_assign = remap[assign]
    st.template = new_T


def side_sweep(state: SamplerState, l: int, side: str, rng) -> int:
    """Resample every row (or column) label of stencil ``l`` once, in index order.

    Returns how many labels changed. Templates are left as they are except
    that newly opened clusters get a zero template entry.
    """
    (ptr, ent, other, other_assign, r, assign, sizes,
     n_blk, l_blk) = _kernel_inputs(state, l, side)
    uniforms = rng.random(ptr.size - 1)
    changed = _kernels.sweep(ptr, ent, other, other_assign, r, assign, sizes, n_blk, l_blk,
                             state.hyper.k_max, math.log(state.concentration(l, side)),
                             state.sigma2, state.stencils[l].tau2, uniforms)
    _apply_side(state, l, side, assign)
    return changed


def _with_open(state: SamplerState, l: int, fn):
    opened = state.open is None
    if opened:
        state.open_stencil(l)
    elif state.open != l:
        raise RuntimeError(f"stencil {state.open} is open, cannot work on stencil {l}")
    try:
        return fn()
    finally:
        if opened:
            state.close_stencil()


def sample_row_assignment(u: int, l: int, state: SamplerState, rng) -> int:
    """Draw a new cluster for row ``u`` of stencil ``l``; returns the (compacted) label."""
    return _sample_entity(u, l, state, "row", rng)


def sample_col_assignment(j: int, l: int, state: SamplerState, rng) -> int:
    return _sample_entity(j, l, state, "col", rng)


def _sample_entity(u, l, state, side, rng) -> int:
    def step():
        clusters, logw = assignment_log_weights(state, l, side, u)
        p = np.exp(logw - logw.max())
        p /= p.sum()
        pick = clusters[int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(),
                                            side="right").clip(max=len(p) - 1))]
        st = state.stencils[l]
        assign = (st.row_assign if side == "row" else st.col_assign).copy()
        k = st.template.shape[0 if side == "row" else 1]
        assign[u] = k if pick == -1 else pick
        _apply_side(state, l, side, assign)
        return int((st.row_assign if side == "row" else st.col_assign)[u])

    return _with_open(state, l, step)


def sample_template(l: int, state: SamplerState, rng) -> np.ndarray:
    """Draw every T_cd of stencil ``l`` from its Normal conditional."""
    def step():
        st = state.stencils[l]
        stats = block_stats(state, l)
        st.template = sample_template_values(stats.counts, stats.sums, state.sigma2,
                                             st.tau2, rng)
        return st.template

    return _with_open(state, l, step)


def sample_variances(state: SamplerState, rng, stencils: Optional[Sequence[int]] = None):
    """Draw sigma^2 (truncated at sigma_max^2) and tau_l^2 for the given stencils.

    Defaults to the open stencil, or all stencils when none is open.
    """
    h = state.hyper
    shape, scale = noise_variance_posterior(state)
    state.sigma2 = sample_inverse_gamma(shape, scale, rng, upper=h.sigma_max ** 2,
                                        max_tries=h.max_rejections)
    if stencils is None:
        stencils = [state.open] if state.open is not None else range(state.s)
    for l in stencils:
        st = state.stencils[l]
        a, b = template_variance_posterior(st.template, h)
        st.tau2 = sample_inverse_gamma(a, b, rng)
    return state.sigma2, [st.tau2 for st in state.stencils]


def gibbs_sweep(l: int, state: SamplerState, rng) -> SamplerState:
    """Rows, then columns, then templates, then variances for stencil ``l``."""
    def step():
        side_sweep(state, l, "row", rng)
        side_sweep(state, l, "col", rng)
        sample_template(l, state, rng)
        sample_variances(state, rng, [l])
        return state

    return _with_open(state, l, step)


def assignment_change_rate(prev, state) -> np.ndarray:
    """Per stencil, fraction of rows+columns whose raw label differs between two states.

    Accepts SamplerStates, StencilModels or lists of (row_assign, col_assign).
    Labels are compared as-is, without matching permuted clusters.
    """
    a, b = _assignment_pairs(prev), _assignment_pairs(state)
    if len(a) != len(b):
        raise ValueError("states have different stencil counts")
    rates = []
    for (c0, d0), (c1, d1) in zip(a, b):
        if c0.shape != c1.shape or d0.shape != d1.shape:
            raise ValueError("dimension mismatch")
        rates.append((np.count_nonzero(c0 != c1) + np.count_nonzero(d0 != d1))
                     / (c0.size + d0.size))
    return np.array(rates)


def _assignment_pairs(x) -> list:
    if isinstance(x, SamplerState):
        return x.assignments()
    if isinstance(x, StencilModel):
        return [(st.row_assign, st.col_assign) for st in x.stencils]
    return [(np.asarray(c), np.asarray(d)) for c, d in x]


# ---------------------------------------------------------------- samples

@dataclass
class SampleSet:
    """Retained posterior states; predictions average over them."""

    models: list
    iterations: list = field(default_factory=list)
    chains: list = field(default_factory=list)

    def __len__(self):
        return len(self.models)

    def predict(self, rows, cols, clamp=None) -> np.ndarray:
        if not self.models:
            raise ValueError("empty sample set")
        out = np.zeros(np.shape(rows))
        for m in self.models:
            out += predict_many(m, rows, cols)
        out /= len(self.models)
        if clamp is not None:
            np.clip(out, clamp[0], clamp[1], out=out)
        return out

    def predictive_model(self) -> StencilModel:
        """One StencilModel whose prediction equals the sample average."""
        w = 1.0 / len(self.models)
        stencils, taus = [], []
        for m in self.models:
            for st, tau in zip(m.stencils, m.template_variances):
                stencils.append(Stencil(st.template * w, st.row_assign, st.col_assign))
                taus.append(tau)
        first = self.models[0]
        sigma2 = float(np.mean([m.noise_variance for m in self.models]))
        return StencilModel(tuple(stencils), first.n_rows, first.n_cols, sigma2,
                            tuple(taus), first.row_ids, first.col_ids)

    def extend(self, other: "SampleSet") -> None:
        self.models.extend(other.models)
        self.iterations.extend(other.iterations)
        self.chains.extend(other.chains)


SAMPLES_MAGIC = b"ACSS"
_SAMPLES_HEADER = struct.Struct("<4sHI")
_SAMPLE_ENTRY = struct.Struct("<IIQ")


def serialize_samples(samples: SampleSet) -> bytes:
    parts = [_SAMPLES_HEADER.pack(SAMPLES_MAGIC, 1, len(samples))]
    chains = samples.chains or [0] * len(samples)
    iters = samples.iterations or list(range(len(samples)))
    for model, chain, it in zip(samples.models, chains, iters):
        blob = serialize(model)
        parts.append(_SAMPLE_ENTRY.pack(chain, it, len(blob)))
        parts.append(blob)
    return b"".join(parts)


def deserialize_samples(data: bytes) -> SampleSet:
    from .stencil import ModelFormatError

    if len(data) < _SAMPLES_HEADER.size:
        raise ModelFormatError("truncated sample-set stream")
    magic, version, count = _SAMPLES_HEADER.unpack_from(data, 0)
    if magic != SAMPLES_MAGIC or version != 1:
        raise ModelFormatError("not a sample-set file or unsupported version")
    pos = _SAMPLES_HEADER.size
    out = SampleSet([], [], [])
    for _ in range(count):
        if pos + _SAMPLE_ENTRY.size > len(data):
            raise ModelFormatError("truncated sample-set stream")
        chain, it, length = _SAMPLE_ENTRY.unpack_from(data, pos)
        pos += _SAMPLE_ENTRY.size
        if pos + length > len(data):
            raise ModelFormatError("truncated sample-set stream")
        out.models.append(deserialize(data[pos:pos + length]))
        out.chains.append(chain)
        out.iterations.append(it)
        pos += length
    if pos != len(data):
        raise ModelFormatError("trailing bytes after sample set")
    return out


# ---------------------------------------------------------------- driver

@dataclass
class BaccamsResult:
    samples: SampleSet
    predictive: StencilModel
    state: SamplerState
    init: StencilModel
    trace: list


def fit_baccams(m: SparseMatrix, h: Hyperparams, seed: int = 0, init_iters: int = 50,
                chain: int = 0, callback=None, init_restarts: int = 1) -> BaccamsResult:
    """Initialise every stencil with the greedy fitter, then Gibbs-sample stencil by stencil.

    After ``burn_in`` outer iterations, every ``thin``-th state is kept until
    ``n_samples`` are collected. ``callback(trace_entry)`` runs per iteration.
    """
    init_seq, chain_seq = np.random.SeedSequence(seed).spawn(2)
    init = fit_accams(m, FitOptions(k=h.k_max, s=h.s, max_kmeans_iters=init_iters,
                                    seed=int(init_seq.generate_state(1)[0]),
                                    restarts=init_restarts))
    rng = np.random.default_rng(chain_seq)
    state = SamplerState.from_model(m, init, h)
    samples = SampleSet([], [], [])
    trace = []
    total = h.burn_in + h.n_samples * h.thin
    for it in range(total):
        prev = state.assignments()
        for l in range(state.s):
            state.open_stencil(l)
            for _ in range(h.sub_sweeps):
                gibbs_sweep(l, state, rng)
            state.close_stencil()
        drift = state.resync()
        state.iteration = it + 1
        r = state.residual
        entry = {
            "iteration": it + 1,
            "sigma2": state.sigma2,
            "train_rmse": float(np.sqrt(r @ r / max(r.size, 1))),
            "change_rate": assignment_change_rate(prev, state).tolist(),
            "k": [st.template.shape for st in state.stencils],
            "drift": drift,
        }
        trace.append(entry)
        if callback is not None:
            callback(entry)
        log.debug("iter %d sigma2 %.5f train rmse %.5f", it + 1, state.sigma2,
                  entry["train_rmse"])
        kept = it + 1 - h.burn_in
        if kept > 0 and kept % h.thin == 0:
            samples.models.append(state.to_model())
            samples.iterations.append(it + 1)
            samples.chains.append(chain)
    return BaccamsResult(samples, samples.predictive_model(), state, init, trace)


def _chain_worker(args):
    m, h, seed, init_iters, chain, restarts = args
    res = fit_baccams(m, h, seed, init_iters, chain, init_restarts=restarts)
    return res.samples, res.trace


def fit_baccams_chains(m: SparseMatrix, h: Hyperparams, seed: int = 0, chains: int = 1,
                       init_iters: int = 50, processes: Optional[int] = None,
                       init_restarts: int = 1):
    """Run independent chains (seeded from one master seed) and pool their samples."""
    if chains == 1:
        res = fit_baccams(m, h, seed, init_iters, 0, init_restarts=init_restarts)
        return res.samples, [res.trace]
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(chains)]
    jobs = [(m, h, s, init_iters, c, init_restarts) for c, s in enumerate(seeds)]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=processes or chains) as pool:
        results = list(pool.map(_chain_worker, jobs))
    pooled = SampleSet([], [], [])
    for ss, _ in results:
        pooled.extend(ss)
    return pooled, [t for _, t in results]
