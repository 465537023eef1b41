import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

import oracles
from accams import _kernels
from accams.matrix import SparseMatrix
from accams.sampler import (DivergenceError, Hyperparams, SampleSet, SamplerState,
                            _kernel_inputs, assignment_change_rate, assignment_log_weights,
                            assignment_probabilities, block_log_marginal, block_stats,
                            crp_assignment_weights, deserialize_samples, fit_baccams,
                            fit_baccams_chains, gibbs_sweep, noise_variance_posterior,
                            sample_col_assignment, sample_inverse_gamma,
                            sample_row_assignment, sample_template, sample_variances,
                            serialize_samples, side_sweep, template_posterior,
                            template_variance_posterior)
from accams.stencil import ModelFormatError, Stencil, StencilModel
from accams.synthetic import planted_matrix


def make_state(R, mask, c, d, sigma2=0.5, tau2=2.0, k_max=10, alpha=1.5, beta=2.5, T=None):
    m = SparseMatrix.from_dense(np.where(mask, R, np.nan))
    c, d = np.asarray(c), np.asarray(d)
    if T is None:
        T = np.zeros((c.max() + 1, d.max() + 1))
    model = StencilModel((Stencil(T, c, d),), *R.shape, sigma2, (tau2,))
    h = Hyperparams(alpha=alpha, beta=beta, sigma_max=100.0, k_max=k_max)
    return SamplerState.from_model(m, model, h)


def random_instance(seed, m=4, n=3, density=0.8, k_r=2, k_c=2):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(m, n)) * 1.5
    mask = rng.random((m, n)) < density
    c = rng.integers(0, k_r, m)
    d = rng.integers(0, k_c, n)
    # keep labels compact so they match the state's labelling
    c = np.unique(c, return_inverse=True)[1].ravel()
    d = np.unique(d, return_inverse=True)[1].ravel()
    return R, mask, c, d


# ---------------------------------------------------------------- CRP weights

def test_crp_weights_examples():
    w, new = crp_assignment_weights([2, 1], 1.0, 4)
    assert w.tolist() == [0.5, 0.25] and new == 0.25
    w, new = crp_assignment_weights([], 3.0, 1)
    assert w.size == 0 and new == 1.0
    w, new = crp_assignment_weights([5, 5], 10.0, 11)
    assert w.tolist() == [0.25, 0.25] and new == 0.5
    with pytest.raises(ValueError):
        crp_assignment_weights([2, 1], 1.0, 3)


@given(st.lists(st.integers(1, 50), max_size=10), st.floats(0.01, 100))
def test_crp_weights_sum_to_one(sizes, alpha):
    w, new = crp_assignment_weights(sizes, alpha, sum(sizes) + 1)
    assert w.sum() + new == pytest.approx(1.0)


# ---------------------------------------------------------------- block marginal

def test_block_marginal_one_dimensional():
    x, s2, t2 = 0.7, 0.3, 1.2
    assert block_log_marginal(1, x, x * x, s2, t2) == pytest.approx(
        norm(0, math.sqrt(s2 + t2)).logpdf(x), abs=1e-12)


def test_block_marginal_empty_and_errors():
    assert block_log_marginal(0, 0.0, 0.0, 1.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        block_log_marginal(2, 1.0, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        block_log_marginal(2, 1.0, 1.0, 1.0, -1.0)


def test_block_marginal_five_dims(rng):
    x = rng.normal(size=5)
    got = block_log_marginal(5, x.sum(), x @ x, 0.5, 2.0)
    assert abs(got - oracles.dense_block_logpdf(x, 0.5, 2.0)) < 1e-8


# ---------------------------------------------------------------- assignment weights

@pytest.mark.parametrize("seed", range(8))
def test_row_weights_match_exact_enumeration(seed):
    R, mask, c, d = random_instance(seed)
    state = make_state(R, mask, c, d)
    for u in range(R.shape[0]):
        got = assignment_probabilities(state, 0, "row", u)
        want = oracles.row_conditional(R, mask, c, d, u, 1.5, 0.5, 2.0, 10)
        assert got.keys() == want.keys()
        for key in want:
            assert abs(got[key] - want[key]) < 1e-10


@pytest.mark.parametrize("seed", range(8))
def test_col_weights_match_exact_enumeration(seed):
    R, mask, c, d = random_instance(100 + seed, m=3, n=4)
    state = make_state(R, mask, c, d)
    for j in range(R.shape[1]):
        got = assignment_probabilities(state, 0, "col", j)
        want = oracles.row_conditional(R.T, mask.T, d, c, j, 2.5, 0.5, 2.0, 10)
        assert got.keys() == want.keys()
        for key in want:
            assert abs(got[key] - want[key]) < 1e-10


def test_two_row_instance_exact():
    R = np.array([[1.0, -0.5], [0.8, 2.0]])
    mask = np.ones((2, 2), bool)
    state = make_state(R, mask, [0, 1], [0, 1], k_max=2)
    got = assignment_probabilities(state, 0, "row", 0)
    want = oracles.row_conditional(R, mask, np.array([0, 1]), np.array([0, 1]), 0, 1.5, 0.5,
                                   2.0, 2)
    assert set(got) == set(want) == {-1, 1}
    assert abs(got[1] - want[1]) < 1e-10


def test_cap_excludes_new_cluster():
    R, mask, c, d = random_instance(3, m=5)
    c = np.array([0, 1, 0, 1, 1])
    state = make_state(R, mask, c, d, k_max=2)
    assert -1 not in assignment_probabilities(state, 0, "row", 0)
    state = make_state(R, mask, c, d, k_max=3)
    assert -1 in assignment_probabilities(state, 0, "row", 0)


def test_tau_to_zero_gives_crp_prior():
    R, mask, c, d = random_instance(5, m=6, n=4)
    c = np.array([0, 0, 1, 1, 1, 2])
    state = make_state(R, mask, c, d, tau2=1e-12, alpha=1.5)
    got = assignment_probabilities(state, 0, "row", 0)
    w, new = crp_assignment_weights([1, 3, 1], 1.5, 6)
    want = {0: w[0], 1: w[1], 2: w[2], -1: new}
    for key in want:
        assert got[key] == pytest.approx(want[key], rel=1e-6)


def test_entity_without_cells_uses_prior_only():
    R = np.random.default_rng(0).normal(size=(5, 3))
    mask = np.ones((5, 3), bool)
    mask[4] = False
    c = np.array([0, 0, 1, 1, 0])
    state = make_state(R, mask, c, [0, 1, 1], alpha=2.0)
    got = assignment_probabilities(state, 0, "row", 4)
    w, new = crp_assignment_weights([2, 2], 2.0, 5)
    assert got == pytest.approx({0: w[0], 1: w[1], -1: new}, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_transpose_symmetry(seed):
    R, mask, c, d = random_instance(200 + seed, m=5, n=4)
    a = make_state(R, mask, c, d, alpha=1.5, beta=2.5)
    b = make_state(R.T, mask.T, d, c, alpha=2.5, beta=1.5)
    for j in range(R.shape[1]):
        ka, wa = assignment_log_weights(a, 0, "col", j)
        kb, wb = assignment_log_weights(b, 0, "row", j)
        assert ka == kb
        np.testing.assert_allclose(wa, wb, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_offset_free_ratios_match_full_marginals(seed):
    R, mask, c, d = random_instance(300 + seed, m=6, n=5, k_r=3, k_c=3)
    state = make_state(R, mask, c, d, sigma2=0.7, tau2=1.3, alpha=1.5)
    u = 2
    k_n = d.max() + 1
    others = np.delete(np.arange(R.shape[0]), u)
    labels = sorted(set(c[others].tolist()))

    def stats(rows):
        n = np.zeros(k_n)
        s = np.zeros(k_n)
        q = np.zeros(k_n)
        for i in rows:
            for j in range(R.shape[1]):
                if mask[i, j]:
                    n[d[j]] += 1
                    s[d[j]] += R[i, j]
                    q[d[j]] += R[i, j] ** 2
        return n, s, q

    nu, su, qu = stats([u])

    def full(n, s, q):
        return sum(block_log_marginal(int(n[b]), s[b], q[b], 0.7, 1.3) for b in range(k_n))

    logw = []
    for t in labels + [-1]:
        members = [i for i in others if c[i] == t] if t != -1 else []
        n, s, q = stats(members)
        prior = math.log(len(members)) if t != -1 else math.log(1.5)
        logw.append(prior + full(n + nu, s + su, q + qu) - full(n, s, q))
    logw = np.array(logw)
    p = np.exp(logw - logw.max())
    p /= p.sum()
    got = assignment_probabilities(state, 0, "row", u)
    for t, pt in zip(labels + [-1], p):
        assert abs(got[t] - pt) < 1e-10


def test_k_max_one_always_zero():
    R, mask, _, _ = random_instance(9, m=6, n=5)
    state = make_state(R, mask, np.zeros(6, int), np.zeros(5, int), k_max=1)
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert all(sample_row_assignment(u, 0, state, rng) == 0 for u in range(6))
        assert all(sample_col_assignment(j, 0, state, rng) == 0 for j in range(5))


# ---------------------------------------------------------------- sufficient statistics

@pytest.mark.parametrize("side", ["row", "col"])
@pytest.mark.parametrize("seed", range(4))
def test_sweep_statistics_stay_exact(side, seed):
    R, mask, c, d = random_instance(400 + seed, m=30, n=20, density=0.6, k_r=4, k_c=3)
    state = make_state(R, mask, c, d, k_max=6)
    state.open_stencil(0)
    (ptr, ent, other, other_assign, r, assign, sizes,
     n_blk, l_blk) = _kernel_inputs(state, 0, side)
    uniforms = np.random.default_rng(seed).random(ptr.size - 1)
    _kernels.sweep(ptr, ent, other, other_assign, r, assign, sizes, n_blk, l_blk, 6,
                   math.log(2.0), 0.5, 2.0, uniforms)
    data = state.data
    own, oth = (data.rows, data.cols) if side == "row" else (data.cols, data.rows)
    block = assign[own] * n_blk.shape[1] + other_assign[oth]
    n_ref = np.bincount(block, minlength=n_blk.size).reshape(n_blk.shape)
    l_ref = np.bincount(block, weights=r, minlength=n_blk.size).reshape(n_blk.shape)
    np.testing.assert_array_equal(n_blk, n_ref)
    assert np.max(np.abs(l_blk - l_ref)) < 1e-9
    np.testing.assert_array_equal(sizes, np.bincount(assign, minlength=sizes.size))
    assert n_blk.sum() == data.nnz


def test_gibbs_sweep_conserves_entries():
    R, mask, c, d = random_instance(7, m=25, n=15, density=0.7, k_r=3, k_c=3)
    state = make_state(R, mask, c, d, k_max=5)
    rng = np.random.default_rng(1)
    for _ in range(5):
        gibbs_sweep(0, state, rng)
        assert block_stats(state, 0).total == state.data.nnz
        assert state.open is None
        assert np.max(np.abs(state.residual - state.recompute_residual())) < 1e-9


def test_side_sweep_compacts_labels():
    R, mask, c, d = random_instance(8, m=40, n=10, density=0.8, k_r=3, k_c=2)
    state = make_state(R, mask, c, d, k_max=8, alpha=50.0)
    rng = np.random.default_rng(0)
    state.open_stencil(0)
    for _ in range(5):
        side_sweep(state, 0, "row", rng)
        st_ = state.stencils[0]
        assert np.unique(st_.row_assign).size == st_.template.shape[0] <= 8


# ---------------------------------------------------------------- conjugate updates

def test_template_posterior_limits():
    mean, _ = template_posterior(10, 37.0, 1.0, 1e12)
    assert mean == pytest.approx(3.7, rel=1e-5)
    mean, _ = template_posterior(10, 37.0, 1e6, 1.0)
    assert abs(mean) < 1e-4
    mean, var = template_posterior(4, 8.0, 1.0, 1.0)
    assert (mean, var) == (pytest.approx(1.6), pytest.approx(0.2))
    mean, var = template_posterior(0, 0.0, 0.5, 3.0)
    assert (mean, var) == (0.0, pytest.approx(3.0))


def test_sample_template_moments():
    # 2000 rows x 20 cols in 1000 x 10 clusters: each block holds 4 cells summing to 8
    m, n = 2000, 20
    R = np.full((m, n), 2.0)
    state = make_state(R, np.ones((m, n), bool), np.arange(m) // 2, np.arange(n) // 2,
                       sigma2=1.0, tau2=1.0, k_max=1000)
    rng = np.random.default_rng(0)
    draws = np.concatenate([sample_template(0, state, rng).ravel() for _ in range(20)])
    assert draws.size == 200_000
    assert draws.mean() == pytest.approx(1.6, rel=0.01)
    assert draws.var() == pytest.approx(0.2, rel=0.02)


def test_noise_variance_posterior_zero_residual():
    R = np.zeros((10, 10))
    state = make_state(R, np.ones((10, 10), bool), np.zeros(10, int), np.zeros(10, int))
    h = state.hyper
    h.eta_a, h.eta_b = 2.0, 0.3
    assert noise_variance_posterior(state) == (52.0, 0.3)
    rng = np.random.default_rng(0)
    draws = np.array([sample_variances(state, rng)[0] for _ in range(20_000)])
    assert draws.mean() == pytest.approx(0.3 / 51, rel=0.02)


def test_template_variance_posterior_parameters():
    a, b = template_variance_posterior(np.zeros((2, 2)), Hyperparams(gamma_a=5, gamma_b=0.3))
    assert (a, b) == (7.0, 0.3)
    a, b = template_variance_posterior(np.ones((2, 3)), Hyperparams(gamma_a=5, gamma_b=0.3))
    assert (a, b) == (8.0, 3.3)


@given(st.floats(0.5, 20), st.floats(0.01, 50), st.floats(0.05, 3), st.integers(0, 2 ** 30))
@settings(max_examples=50, deadline=None)
def test_truncated_draws_respect_bound(shape, scale, sigma_max, seed):
    rng = np.random.default_rng(seed)
    try:
        x = sample_inverse_gamma(shape, scale, rng, size=50, upper=sigma_max ** 2,
                                 max_tries=20_000)
    except DivergenceError:
        return
    assert np.all(np.sqrt(x) <= sigma_max)


def test_sample_variances_bounded_sigma():
    R = np.random.default_rng(0).normal(size=(20, 10))
    state = make_state(R, np.ones((20, 10), bool), np.zeros(20, int), np.zeros(10, int))
    state.hyper.sigma_max = 1.0
    rng = np.random.default_rng(0)
    for _ in range(50):
        sigma2, taus = sample_variances(state, rng)
        assert math.sqrt(sigma2) <= 1.0 and all(t > 0 for t in taus)


def test_divergence_error():
    rng = np.random.default_rng(0)
    with pytest.raises(DivergenceError):
        sample_inverse_gamma(50.0, 500.0, rng, upper=1e-3, max_tries=1000)


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        Hyperparams(alpha=0)
    with pytest.raises(ValueError):
        Hyperparams(burn_in=0)
    h = Hyperparams()
    assert (h.alpha, h.beta, h.eta_a, h.eta_b, h.gamma_a, h.gamma_b) == (10, 10, 2, 0.3, 5, 0.3)
    assert (h.burn_in, h.sub_sweeps, h.sigma_max) == (30, 3, 1.0)


def test_state_clamps_initial_sigma():
    R = np.zeros((3, 3))
    m = SparseMatrix.from_dense(R)
    model = StencilModel((Stencil([[0.0]], [0] * 3, [0] * 3),), 3, 3, 25.0, (1.0,))
    state = SamplerState.from_model(m, model, Hyperparams(sigma_max=2.0))
    assert state.sigma2 == 4.0


# ---------------------------------------------------------------- driver

def planted_single(seed, noise=0.01):
    return planted_matrix(40, 30, 2, amplitudes=(1.0,), noise=noise, seed=seed)


def test_stability_at_truth():
    changed = 0
    rng = np.random.default_rng(0)
    for trial in range(100):
        m, truth = planted_single(trial)
        h = Hyperparams(k_max=2, s=1)
        state = SamplerState.from_model(m, truth, h, sigma2=0.01 ** 2)
        before = state.assignments()
        gibbs_sweep(0, state, rng)
        changed += assignment_change_rate(before, state)[0] > 0
    assert changed <= 1


def test_change_rate_semantics():
    m, truth = planted_single(0)
    state = SamplerState.from_model(m, truth, Hyperparams(k_max=2))
    assert assignment_change_rate(state, state).tolist() == [0.0]
    c, d = state.assignments()[0]
    flipped = [(1 - c, 1 - d)]
    assert assignment_change_rate(flipped, state).tolist() == [1.0]
    with pytest.raises(ValueError):
        assignment_change_rate([(c[:-1], d)], state)
    with pytest.raises(ValueError):
        assignment_change_rate([], state)


def test_planted_change_rate_small():
    m, truth = planted_single(1)
    state = SamplerState.from_model(m, truth, Hyperparams(k_max=2), sigma2=1e-4)
    rng = np.random.default_rng(2)
    before = state.assignments()
    for _ in range(3):
        gibbs_sweep(0, state, rng)
    assert assignment_change_rate(before, state)[0] < 0.01


def test_single_sample_predictive_equals_state():
    m, _ = planted_single(2, noise=0.1)
    res = fit_baccams(m, Hyperparams(k_max=2, s=1, burn_in=1, n_samples=1), seed=0)
    assert len(res.samples) == 1
    np.testing.assert_allclose(res.predictive.dense(), res.samples.models[0].dense(),
                               atol=1e-12)


def test_fit_baccams_residual_invariant_and_trace():
    m, _ = planted_matrix(60, 40, 3, noise=0.1, seed=3)
    res = fit_baccams(m, Hyperparams(k_max=3, s=2, burn_in=4, n_samples=3), seed=1)
    assert len(res.trace) == 7
    assert all(e["drift"] < 1e-9 for e in res.trace)
    assert all(e["sigma2"] <= 1.0 for e in res.trace)
    assert res.samples.iterations == [5, 6, 7]
    for model in res.samples.models:
        assert model.noise_variance <= 1.0


def test_fit_baccams_deterministic():
    m, _ = planted_matrix(40, 30, 3, noise=0.1, seed=4)
    h = Hyperparams(k_max=3, s=2, burn_in=2, n_samples=2)
    a = serialize_samples(fit_baccams(m, h, seed=9).samples)
    b = serialize_samples(fit_baccams(m, h, seed=9).samples)
    assert a == b


def test_sample_set_round_trip_and_errors():
    m, _ = planted_matrix(40, 30, 3, noise=0.1, seed=5)
    samples = fit_baccams(m, Hyperparams(k_max=3, s=1, burn_in=1, n_samples=3), seed=0).samples
    blob = serialize_samples(samples)
    back = deserialize_samples(blob)
    assert back.iterations == samples.iterations and back.chains == samples.chains
    rows, cols = m.rows, m.cols
    np.testing.assert_allclose(back.predict(rows, cols), samples.predict(rows, cols), atol=1e-5)
    with pytest.raises(ModelFormatError):
        deserialize_samples(blob[:-3])
    with pytest.raises(ModelFormatError):
        deserialize_samples(b"NOPE" + blob[4:])
    with pytest.raises(ValueError):
        SampleSet([]).predict([0], [0])


def test_parallel_chains_pool_samples():
    m, _ = planted_matrix(40, 30, 3, noise=0.1, seed=6)
    h = Hyperparams(k_max=3, s=1, burn_in=1, n_samples=2)
    samples, traces = fit_baccams_chains(m, h, seed=0, chains=2, processes=2, init_restarts=10)
    assert len(samples) == 4 and sorted(set(samples.chains)) == [0, 1]
    assert len(traces) == 2
