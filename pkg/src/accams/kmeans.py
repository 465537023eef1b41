"""Greedy additive co-clustering: k-means rows, count-weighted k-means columns,
block-mean templates, and backfitting on residuals."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .matrix import DataError, SparseMatrix
from .stencil import Stencil, StencilModel, block_sums, refit_template

log = logging.getLogger(__name__)


@dataclass
class FitOptions:
    k: int = 10
    s: int = 1
    max_kmeans_iters: int = 50
    seed: int = 0
    alternate_refinement_rounds: int = 0
    clamp: Optional[tuple] = None
    # independent random initialisations per clustering stage; lowest objective wins
    restarts: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.s < 1:
            raise ValueError("s must be >= 1")
        if self.max_kmeans_iters < 1:
            raise ValueError("max_kmeans_iters must be >= 1")
        if self.alternate_refinement_rounds < 0:
            raise ValueError("alternate_refinement_rounds must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class RowClusteringResult:
    centers: np.ndarray       # k_m x n
    assignments: np.ndarray   # length m
    counts: np.ndarray        # rows per cluster
    cell_support: np.ndarray  # k_m x n observed cells behind each center coordinate
    objective_trace: list = field(default_factory=list)
    sweeps: int = 0


def _row_distances(m: SparseMatrix, centers: np.ndarray) -> np.ndarray:
    """Squared distance of each row to each center over the row's observed coordinates."""
    k = centers.shape[0]
    out = np.empty((m.n_rows, k))
    for j in range(k):
        diff = m.values - centers[j, m.cols]
        out[:, j] = np.bincount(m.rows, weights=diff * diff, minlength=m.n_rows)
    return out


def _row_distances_dense(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _center_stats(m: SparseMatrix, assign: np.ndarray, k: int):
    idx = assign[m.rows] * m.n_cols + m.cols
    support = np.bincount(idx, minlength=k * m.n_cols).reshape(k, m.n_cols)
    sums = np.bincount(idx, weights=m.values, minlength=k * m.n_cols).reshape(k, m.n_cols)
    return support, sums


def kmeans_objective(m: SparseMatrix, centers, assignments) -> float:
    """Sum over observed cells of (M_ij - centers[c_i, j])^2."""
    centers = np.asarray(centers, dtype=np.float64)
    assignments = np.asarray(assignments)
    if centers.ndim != 2 or centers.shape[1] != m.n_cols or assignments.shape != (m.n_rows,):
        raise ValueError("centers/assignments do not match the matrix dimensions")
    diff = m.values - centers[assignments[m.rows], m.cols]
    return float(diff @ diff)


def _column_means(m: SparseMatrix) -> np.ndarray:
    cnt = m.col_counts()
    sums = np.bincount(m.cols, weights=m.values, minlength=m.n_cols)
    return np.where(cnt > 0, sums / np.maximum(cnt, 1), 0.0)


def distinct_row_labels(m: SparseMatrix) -> np.ndarray:
    """Label per row such that rows with identical observed cells share a label."""
    order = np.lexsort((m.cols, m.rows))
    r, c, v = m.rows[order], m.cols[order], m.values[order]
    # fixed projections of the (col, value) sequence; identical rows sum identically
    p1 = np.sin(0.7071 * c + 0.3) + 2.0
    p2 = np.cos(1.6180 * c) + 2.0
    sig = np.stack([np.bincount(r, weights=w, minlength=m.n_rows)
                    for w in (v * p1, v * p2 + p1, p2)], axis=1)
    _, inv = np.unique(sig, axis=0, return_inverse=True)
    return inv.ravel()


def _initial_picks(labels: np.ndarray, k: int, rng, strict: bool = True) -> np.ndarray:
    """``k`` random positions with pairwise different labels (padded with repeats
    when ``strict`` is off and too few labels exist)."""
    perm = rng.permutation(labels.size)
    _, first = np.unique(labels[perm], return_index=True)
    first = np.sort(first)
    if first.size < k:
        if strict:
            raise DataError(f"only {first.size} distinct rows, cannot start {k} clusters")
        rest = np.setdiff1d(np.arange(labels.size), first)
        first = np.concatenate([first, rest[:k - first.size]])
    return perm[first[:k]]


def row_clustering(m: SparseMatrix, k_m: int, iters: int = 50, seed=0,
                   dense: bool = False, restarts: int = 1) -> RowClusteringResult:
    """k-means over rows restricted to each row's observed coordinates.

    Centers start as ``k_m`` rows drawn without replacement among rows with
    distinct observed cells (unobserved coordinates filled with the column
    mean); fewer than ``k_m`` distinct rows is an error. Coordinates with no support keep
    their previous value. Empty clusters are dropped at the end.

    ``dense=True`` evaluates distances on the materialised matrix; it requires
    every cell to be observed and exists to cross-check the sparse path.
    """
    if m.nnz == 0:
        raise DataError("empty matrix")
    if not 1 <= k_m <= m.n_rows:
        raise ValueError(f"k_m={k_m} must be in [1, n_rows={m.n_rows}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = None
    if dense:
        if m.nnz != m.n_rows * m.n_cols:
            raise DataError("dense path needs a fully observed matrix")
        x = m.to_dense()
    labels = distinct_row_labels(m)
    best = None
    for _ in range(restarts):
        res = _row_kmeans(m, k_m, iters, rng, x, labels)
        if best is None or res.objective_trace[-1] < best.objective_trace[-1]:
            best = res
    return best


def _row_kmeans(m: SparseMatrix, k_m: int, iters: int, rng, x, labels) -> RowClusteringResult:
    dense = x is not None
    picks = _initial_picks(labels, k_m, rng)
    centers = np.tile(_column_means(m), (k_m, 1))
    in_pick = np.full(m.n_rows, -1)
    in_pick[picks] = np.arange(k_m)
    sel = in_pick[m.rows] >= 0
    centers[in_pick[m.rows[sel]], m.cols[sel]] = m.values[sel]

    assign = None
    trace = []
    sweeps = 0
    support = np.zeros((k_m, m.n_cols), dtype=np.int64)
    for _ in range(iters):
        dist = _row_distances_dense(x, centers) if dense else _row_distances(m, centers)
        new = np.argmin(dist, axis=1)  # lowest index on ties
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        sweeps += 1
        support, sums = _center_stats(m, assign, k_m)
        has = support > 0
        centers = np.where(has, sums / np.maximum(support, 1), centers)
        trace.append(kmeans_objective(m, centers, assign))

    counts = np.bincount(assign, minlength=k_m)
    keep = np.flatnonzero(counts)
    if keep.size < k_m:
        remap = np.full(k_m, -1)
        remap[keep] = np.arange(keep.size)
        assign = remap[assign]
        centers, support, counts = centers[keep], support[keep], counts[keep]
    return RowClusteringResult(centers, assign, counts, support, trace, sweeps)


def column_objective(v: RowClusteringResult, centers: np.ndarray, d: np.ndarray) -> float:
    diff = v.centers - centers[:, d]
    return float((diff * diff * v.cell_support).sum())


def column_clustering(v: RowClusteringResult, k_n: int, iters: int = 50, seed=0,
                      restarts: int = 1):
    """Cluster the columns of the row-center matrix ``V`` under the support-weighted
    distance sum_l t[l, j] (V[l, j] - w[l])^2.

    Initial centers are distinct columns of ``V`` where possible.
    Returns ``(template, assignments, counts)`` where ``template`` holds the
    support-weighted per-coordinate column centers (``k_m x k_n``).
    """
    V, t = v.centers, v.cell_support.astype(np.float64)
    k_m, n = V.shape
    if not 1 <= k_n <= n:
        raise ValueError(f"k_n={k_n} must be in [1, n_cols={n}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    _, labels = np.unique(V.T, axis=0, return_inverse=True)
    best = None
    for _ in range(restarts):
        W, d, counts = _column_kmeans(V, t, k_n, iters, rng, labels.ravel())
        obj = column_objective(v, W, d)
        if best is None or obj < best[0]:
            best = (obj, W, d, counts)
    return best[1:]


def _column_kmeans(V, t, k_n, iters, rng, labels):
    k_m, n = V.shape
    W = V[:, _initial_picks(labels, k_n, rng, strict=False)].copy()
    d = None
    tv = t * V
    for _ in range(iters):
        dist = np.empty((n, k_n))
        for j in range(k_n):
            diff = V - W[:, j:j + 1]
            dist[:, j] = (t * diff * diff).sum(axis=0)
        new = np.argmin(dist, axis=1)
        if d is not None and np.array_equal(new, d):
            break
        d = new
        wsum = np.zeros((k_m, k_n))
        wcnt = np.zeros((k_m, k_n))
        for l in range(k_m):
            wsum[l] = np.bincount(d, weights=tv[l], minlength=k_n)
            wcnt[l] = np.bincount(d, weights=t[l], minlength=k_n)
        W = np.where(wcnt > 0, wsum / np.maximum(wcnt, 1e-300), W)
    counts = np.bincount(d, minlength=k_n)
    keep = np.flatnonzero(counts)
    if keep.size < k_n:
        remap = np.full(k_n, -1)
        remap[keep] = np.arange(keep.size)
        d = remap[d]
        W, counts = W[:, keep], counts[keep]
    return W, d, counts


def _reassign_rows(m: SparseMatrix, T: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Best row cluster for each row given column assignments and template."""
    dist = np.empty((m.n_rows, T.shape[0]))
    for c in range(T.shape[0]):
        diff = m.values - T[c, d[m.cols]]
        dist[:, c] = np.bincount(m.rows, weights=diff * diff, minlength=m.n_rows)
    return np.argmin(dist, axis=1)


def _refine(m: SparseMatrix, c, d, T, rounds: int):
    """Alternate row and column reassignment against the current template."""
    for _ in range(rounds):
        c_new = _reassign_rows(m, T, d)
        T = refit_template(m, c_new, d, T.shape[0], T.shape[1])
        d_new = _reassign_rows(m.transpose(), T.T, c_new)
        T = refit_template(m, c_new, d_new, T.shape[0], T.shape[1])
        changed = not (np.array_equal(c_new, c) and np.array_equal(d_new, d))
        c, d = c_new, d_new
        if not changed:
            break
    return c, d, T


def fit_stencil(m: SparseMatrix, k: int, iters: int, rng, refine_rounds: int = 0,
                restarts: int = 1) -> Stencil:
    """One greedy stencil fitted to ``m`` (typically a residual)."""
    n_distinct = int(distinct_row_labels(m).max()) + 1
    rc = row_clustering(m, min(k, n_distinct), iters, rng, restarts=restarts)
    _, d, _ = column_clustering(rc, min(k, m.n_cols), iters, rng, restarts=restarts)
    c = rc.assignments
    k_m, k_n = rc.centers.shape[0], int(d.max()) + 1
    T = refit_template(m, c, d, k_m, k_n)
    if refine_rounds:
        c, d, T = _refine(m, c, d, T, refine_rounds)
    st = Stencil(T, c, d).compact()
    # entities without training cells carry no signal; park them in the largest cluster
    mr, mc = st.modal_clusters()
    c = np.where(m.row_counts() > 0, st.row_assign, mr)
    d = np.where(m.col_counts() > 0, st.col_assign, mc)
    return Stencil(st.template, c, d).compact()


def fit_accams(m: SparseMatrix, opts: FitOptions, callback=None) -> StencilModel:
    """Fit ``opts.s`` stencils one after another, each on the residual of the previous ones.

    ``callback(l, stencil, train_sse)`` is invoked after each stencil.
    """
    if m.nnz == 0:
        raise DataError("empty matrix")
    rng = np.random.default_rng(opts.seed)
    resid = m.values.copy()
    stencils = []
    for l in range(opts.s):
        st = fit_stencil(m.with_values(resid), opts.k, opts.max_kmeans_iters, rng,
                         opts.alternate_refinement_rounds, opts.restarts)
        resid = resid - st.values_at(m.rows, m.cols)
        stencils.append(st)
        sse = float(resid @ resid)
        log.debug("stencil %d: k=(%d,%d) train rmse %.6f", l, st.k_m, st.k_n,
                  np.sqrt(sse / m.nnz))
        if callback is not None:
            callback(l, st, sse)
    noise = max(float(resid @ resid) / m.nnz, 1e-12)
    tau2 = tuple(max(float(np.mean(st.template ** 2)), 1e-12) for st in stencils)
    return StencilModel(tuple(stencils), m.n_rows, m.n_cols, noise, tau2, m.row_ids, m.col_ids)
