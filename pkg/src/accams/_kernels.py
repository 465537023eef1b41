"""Compiled inner loops of the collapsed Gibbs sampler.

Cluster labels live in fixed-capacity slots ``0..cap-1``; a slot is active
when its size is positive. Block statistics are oriented
``[this-side cluster, other-side cluster]``.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def block_term(n, s, sigma2, tau2):
    """Cluster-dependent part of the collapsed block log-likelihood."""
    denom = sigma2 + n * tau2
    return -0.5 * math.log(denom) + (tau2 / (2.0 * sigma2)) * s * s / denom


@njit(cache=True)
def entity_log_weights(n_ud, l_ud, touched, n_touched, sizes, n_blk, l_blk,
                       k_max, log_conc, sigma2, tau2, out):
    """Unnormalised log probabilities of placing one held-out entity.

    ``out[t]`` is filled for every slot; inactive slots get -inf except the
    first free slot, which receives the new-cluster weight when fewer than
    ``k_max`` clusters are active. Returns that slot, or -1.
    """
    cap = sizes.shape[0]
    n_active = 0
    new_slot = -1
    for t in range(cap):
        if sizes[t] > 0:
            n_active += 1
        elif new_slot < 0:
            new_slot = t
    if n_active >= k_max:
        new_slot = -1
    for t in range(cap):
        if sizes[t] > 0:
            w = math.log(sizes[t])
        elif t == new_slot:
            w = log_conc
        else:
            out[t] = -np.inf
            continue
        for q in range(n_touched):
            d = touched[q]
            n0 = n_blk[t, d]
            s0 = l_blk[t, d]
            w += (block_term(n0 + n_ud[d], s0 + l_ud[d], sigma2, tau2)
                  - block_term(n0, s0, sigma2, tau2))
        out[t] = w
    return new_slot


@njit(cache=True)
def _gather(u, ptr, ent, other, other_assign, resid, n_ud, l_ud, touched):
    n_touched = 0
    for p in range(ptr[u], ptr[u + 1]):
        e = ent[p]
        d = other_assign[other[e]]
        if n_ud[d] == 0:
            touched[n_touched] = d
            n_touched += 1
        n_ud[d] += 1
        l_ud[d] += resid[e]
    return n_touched


@njit(cache=True)
def entity_weights(u, ptr, ent, other, other_assign, resid, assign, sizes, n_blk,
                   l_blk, k_max, log_conc, sigma2, tau2):
    """Log weights for entity ``u`` with its own contribution held out (state untouched)."""
    cap_o = n_blk.shape[1]
    n_ud = np.zeros(cap_o, dtype=np.int64)
    l_ud = np.zeros(cap_o)
    touched = np.empty(cap_o, dtype=np.int64)
    nt = _gather(u, ptr, ent, other, other_assign, resid, n_ud, l_ud, touched)
    sz = sizes.copy()
    nb = n_blk.copy()
    lb = l_blk.copy()
    cu = assign[u]
    sz[cu] -= 1
    for q in range(nt):
        d = touched[q]
        nb[cu, d] -= n_ud[d]
        lb[cu, d] -= l_ud[d]
    out = np.empty(sz.shape[0])
    new_slot = entity_log_weights(n_ud, l_ud, touched, nt, sz, nb, lb, k_max, log_conc,
                                  sigma2, tau2, out)
    return out, new_slot


@njit(cache=True)
def sweep(ptr, ent, other, other_assign, resid, assign, sizes, n_blk, l_blk,
          k_max, log_conc, sigma2, tau2, uniforms):
    """Resample the cluster of every entity on one side, in index order.

    Returns the number of entities whose label changed.
    """
    n_ent = ptr.shape[0] - 1
    cap = sizes.shape[0]
    cap_o = n_blk.shape[1]
    n_ud = np.zeros(cap_o, dtype=np.int64)
    l_ud = np.zeros(cap_o)
    touched = np.empty(cap_o, dtype=np.int64)
    logw = np.empty(cap)
    changed = 0
    for u in range(n_ent):
        nt = _gather(u, ptr, ent, other, other_assign, resid, n_ud, l_ud, touched)
        cu = assign[u]
        sizes[cu] -= 1
        for q in range(nt):
            d = touched[q]
            n_blk[cu, d] -= n_ud[d]
            l_blk[cu, d] -= l_ud[d]
            if n_blk[cu, d] < 0:
                raise ValueError("negative block count after removal")
        entity_log_weights(n_ud, l_ud, touched, nt, sizes, n_blk, l_blk, k_max,
                           log_conc, sigma2, tau2, logw)
        top = -np.inf
        for t in range(cap):
            if logw[t] > top:
                top = logw[t]
        total = 0.0
        for t in range(cap):
            logw[t] = math.exp(logw[t] - top)
            total += logw[t]
        target = uniforms[u] * total
        acc = 0.0
        pick = -1
        for t in range(cap):
            if logw[t] > 0.0:
                pick = t
                acc += logw[t]
                if acc > target:
                    break
        if pick != cu:
            changed += 1
        assign[u] = pick
        sizes[pick] += 1
        for q in range(nt):
            d = touched[q]
            n_blk[pick, d] += n_ud[d]
            l_blk[pick, d] += l_ud[d]
            n_ud[d] = 0
            l_ud[d] = 0.0
    return changed
