import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp
from oracles import (
    enumerated_statistics,
    explicit_mstep,
    factorized_objective,
    lgmm_table,
    maximize_factorized,
    mc_expected_loglik,
    random_hmm,
    soft_policy_iteration,
    unrestricted_maximum,
)

from h3mcluster.h3m_em import H3m
from h3mcluster.hierclust import rand_index
from h3mcluster.hmm import Hmm
from h3mcluster.vhem import (
    VhemConfig,
    VhemState,
    batch_estep,
    compute_zhat,
    hmm_pair_estep,
    mstep,
    run_vhem,
    vhem_reduce,
)


def random_mixture(rng, K, S, M, d):
    return H3m(rng.dirichlet(np.ones(K)), [random_hmm(rng, S, M, d) for _ in range(K)])


def shifted_hmm(shift, S=2, d=1):
    means = (shift + np.arange(S, dtype=float))[:, None, None] * np.ones((S, 1, d))
    covs = np.tile(0.2 * np.eye(d), (S, 1, 1, 1))
    A = np.full((S, S), 0.1 / max(S - 1, 1))
    np.fill_diagonal(A, 0.9 if S > 1 else 1.0)
    return Hmm(np.full(S, 1.0 / S), A, np.ones((S, 1)), means, covs)


def test_config_validation():
    for bad in (dict(K_r=0), dict(K_r=1, tau=0), dict(K_r=1, N_virtual=0), dict(K_r=1, tol=0.0)):
        with pytest.raises(ValueError):
            VhemConfig(**bad)
    assert VhemConfig(K_r=2).virtual_count(7) == 70_000


def test_tau_one_is_softmax_over_gmm_bounds():
    rng = np.random.default_rng(0)
    base, red = random_hmm(rng, 3, 2, 2), random_hmm(rng, 2, 2, 2)
    p = hmm_pair_estep(base, red, 1)
    lg = lgmm_table(base, red)
    np.testing.assert_allclose(p.lgmm, lg, rtol=1e-12)
    scores = np.log(red.pi)[None, :] + lg
    assert p.lhmm == pytest.approx(base.pi @ logsumexp(scores, axis=1), rel=1e-12)
    np.testing.assert_allclose(p.phi1, np.exp(scores - logsumexp(scores, axis=1, keepdims=True)), atol=1e-14)
    assert p.phi.shape[0] == 0


def test_recursion_equals_objective_at_its_argmax_and_numerical_maximum():
    rng = np.random.default_rng(1)
    base, red = random_hmm(rng, 2, 1, 1), random_hmm(rng, 2, 1, 1)
    p = hmm_pair_estep(base, red, 2)
    assert factorized_objective(base, red, 2, p.phi1, list(p.phi)) == pytest.approx(p.lhmm, abs=1e-12)
    assert maximize_factorized(base, red, 2, starts=3) <= p.lhmm + 1e-9
    assert p.lhmm <= unrestricted_maximum(base, red, 2) + 1e-12


@pytest.mark.parametrize("seed", range(6))
def test_recursion_matches_policy_iteration(seed):
    rng = np.random.default_rng(100 + seed)
    Sb, Sr, tau = 2, 2, 3
    base, red = random_hmm(rng, Sb, 1, 2), random_hmm(rng, Sr, 1, 2)
    p = hmm_pair_estep(base, red, tau)
    value, phi1, phis = soft_policy_iteration(base, red, tau)
    assert p.lhmm == pytest.approx(value, abs=1e-9)
    np.testing.assert_allclose(p.phi1, phi1, atol=1e-9)
    for t in range(tau - 1):
        np.testing.assert_allclose(p.phi[t], phis[t], atol=1e-9)


def test_summary_statistics_match_enumeration():
    rng = np.random.default_rng(2)
    base, red = random_hmm(rng, 2, 1, 1), random_hmm(rng, 3, 1, 1)
    p = hmm_pair_estep(base, red, 4)
    nu, xi = enumerated_statistics(base, red, 4, p.phi1, list(p.phi))
    np.testing.assert_allclose(p.nu, nu, atol=1e-13)
    np.testing.assert_allclose(p.xi, xi, atol=1e-13)
    np.testing.assert_allclose(p.nu1_hat, nu[0].sum(axis=1), atol=1e-13)
    np.testing.assert_allclose(p.nu_hat, nu.sum(axis=0), atol=1e-13)
    np.testing.assert_allclose(p.xi_hat, xi.sum(axis=(0, 3)), atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    Sb=st.integers(1, 4),
    Sr=st.integers(1, 4),
    Mb=st.integers(1, 2),
    Mr=st.integers(1, 2),
    tau=st.integers(1, 6),
)
def test_pair_estep_invariants(seed, Sb, Sr, Mb, Mr, tau):
    rng = np.random.default_rng(seed)
    p = hmm_pair_estep(random_hmm(rng, Sb, Mb, 2), random_hmm(rng, Sr, Mr, 2), tau)
    assert np.all(p.phi1 >= 0) and np.all(p.phi >= 0)
    np.testing.assert_allclose(p.phi1.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p.phi.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p.eta.sum(axis=-1), 1.0, atol=1e-12)
    assert p.nu1_hat.sum() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(p.nu.sum(axis=(1, 2)), 1.0, atol=1e-9)
    assert p.xi_hat.sum() == pytest.approx(tau - 1, abs=1e-9)
    assert np.isfinite(p.lhmm)


def test_bound_below_monte_carlo():
    rng = np.random.default_rng(3)
    for _ in range(3):
        base, red = random_hmm(rng, 3, 2, 2), random_hmm(rng, 2, 2, 2)
        p = hmm_pair_estep(base, red, 5)
        mean, se = mc_expected_loglik(base, red, 5, n=10_000, seed=int(rng.integers(1 << 30)))
        assert p.lhmm <= mean + 3 * se


def test_dimension_mismatch():
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError):
        hmm_pair_estep(random_hmm(rng, 2, 1, 1), random_hmm(rng, 2, 1, 2), 3)


def test_zhat_single_component():
    rng = np.random.default_rng(5)
    base = random_mixture(rng, 4, 2, 1, 1)
    red = H3m([1.0], [random_hmm(rng, 2, 1, 1)])
    L = batch_estep(base.stacked(), red.stacked(), 5).lhmm
    zhat, lb = compute_zhat(base, red, L, 100)
    np.testing.assert_array_equal(zhat, 1.0)
    assert lb == pytest.approx(float(np.sum(100 * base.omega * L[:, 0])), rel=1e-14)


def test_zhat_identical_components_split_evenly():
    rng = np.random.default_rng(6)
    base = random_mixture(rng, 3, 2, 1, 1)
    h = random_hmm(rng, 2, 1, 1)
    red = H3m([0.5, 0.5], [h, h])
    L = batch_estep(base.stacked(), red.stacked(), 5).lhmm
    zhat, _ = compute_zhat(base, red, L, 1000)
    np.testing.assert_allclose(zhat, 0.5, atol=1e-15)


def test_zhat_hard_for_large_n():
    # N_i = 10**4 per component: a bound gap g gives max zhat = 1 / (1 + exp(-10**4 g))
    base = H3m.uniform([shifted_hmm(0.0)] * 4)
    red = H3m.uniform([shifted_hmm(0.0), shifted_hmm(5.0), shifted_hmm(9.0)])
    L = np.array([[0.0, -2e-3, -5.0], [-2e-3, 0.0, -2.0], [-1.0, -3.0, 0.0], [-4.0, -0.5, 0.0]]) - 10.0
    zhat, _ = compute_zhat(base, red, L, 10_000 * base.K)
    assert np.all(zhat.max(axis=1) >= 1 - 1e-6)
    np.testing.assert_allclose(zhat.sum(axis=1), 1.0, atol=1e-12)
    L[0] = [-10.0, -10.001, -15.0]
    zhat, _ = compute_zhat(base, red, L, 10_000 * base.K)
    assert zhat[0, 0] == pytest.approx(1.0 / (1.0 + np.exp(-10.0)), rel=1e-9)


def test_omega_update_identity():
    rng = np.random.default_rng(7)
    base = random_mixture(rng, 2, 2, 1, 1)
    red = H3m.uniform([random_hmm(rng, 2, 1, 1) for _ in range(2)])
    est = batch_estep(base.stacked(), red.stacked(), 3)
    new = mstep(base, VhemState(np.eye(2), est, red))
    np.testing.assert_allclose(new.omega, [0.5, 0.5], atol=1e-15)


def test_degenerate_fixed_point():
    base_h = Hmm([1.0], [[1.0]], [[1.0]], [[[0.7, -0.2]]], [[[[1.3, 0.2], [0.2, 0.5]]]])
    base = H3m([1.0], [base_h])
    red = H3m([1.0], [Hmm([1.0], [[1.0]], [[1.0]], [[[5.0, 5.0]]], [[2.0 * np.eye(2)]])])
    est = batch_estep(base.stacked(), red.stacked(), 4)
    zhat, _ = compute_zhat(base, red, est.lhmm, 10)
    new = mstep(base, VhemState(zhat, est, red)).components[0]
    np.testing.assert_allclose(new.means, base_h.means, atol=1e-14)
    np.testing.assert_allclose(new.covs, base_h.covs, atol=1e-14)


@pytest.mark.parametrize("M", [1, 2])
def test_mstep_matches_explicit_summation(M):
    rng = np.random.default_rng(8 + M)
    base = random_mixture(rng, 3, 2, M, 2)
    red = random_mixture(rng, 2, 2, M, 2)
    est = batch_estep(base.stacked(), red.stacked(), 2)
    zhat, _ = compute_zhat(base, red, est.lhmm, 2)  # small N keeps zhat soft
    state = VhemState(zhat, est, red)
    new = mstep(base, state, cov_floor=0.0)
    pairs = [[state.pair(i, j) for j in range(2)] for i in range(3)]
    ref = explicit_mstep(base, red, zhat, pairs)
    for j, r in enumerate(ref):
        h = new.components[j]
        assert new.omega[j] == pytest.approx(float(r["omega"]), rel=1e-13)
        for ours, key in ((h.pi, "pi"), (h.trans, "A"), (h.weights, "c"), (h.means, "means"), (h.covs, "covs")):
            np.testing.assert_allclose(ours, r[key].astype(float), rtol=1e-11, atol=1e-13)


def _state_perm(h, rng):
    return h.permute_states(rng.permutation(h.S))


def test_base_state_permutation_invariance():
    rng = np.random.default_rng(9)
    base = random_mixture(rng, 4, 3, 2, 2)
    red = random_mixture(rng, 2, 3, 2, 2)
    perm_base = H3m(base.omega, [_state_perm(h, rng) for h in base.components])
    outs = []
    for b in (base, perm_base):
        est = batch_estep(b.stacked(), red.stacked(), 5)
        zhat, lb = compute_zhat(b, red, est.lhmm, 40)
        outs.append((est.lhmm, zhat, lb, mstep(b, VhemState(zhat, est, red)).stacked()))
    np.testing.assert_allclose(outs[0][0], outs[1][0], rtol=1e-12)
    np.testing.assert_allclose(outs[0][1], outs[1][1], atol=1e-12)
    for a, b in zip(outs[0][3], outs[1][3]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100.0))
def test_scaling_n_keeps_argmax(seed, scale):
    rng = np.random.default_rng(seed)
    base = random_mixture(rng, 5, 2, 1, 1)
    red = H3m.uniform([random_hmm(rng, 2, 1, 1) for _ in range(3)])
    L = batch_estep(base.stacked(), red.stacked(), 4).lhmm
    z1, _ = compute_zhat(base, red, L, 1000)
    z2, _ = compute_zhat(base, red, L, 1000 * scale)
    np.testing.assert_array_equal(z1.argmax(axis=1), z2.argmax(axis=1))


def test_scaling_n_can_move_argmax_with_unequal_weights():
    # log omega_j competes with N_i L_ij, so the invariance needs equal reduced weights
    base = H3m.uniform([shifted_hmm(0.0)])
    red = H3m([0.9, 0.1], [shifted_hmm(0.0), shifted_hmm(1.0)])
    L = np.array([[-1.0, -0.99]])
    assert compute_zhat(base, red, L, 1)[0].argmax() == 0
    assert compute_zhat(base, red, L, 10_000)[0].argmax() == 1


@settings(max_examples=12, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    Kb=st.integers(2, 6),
    Kr=st.integers(1, 3),
    S=st.integers(1, 3),
    M=st.integers(1, 2),
    tau=st.integers(1, 5),
)
def test_lower_bound_non_decreasing(seed, Kb, Kr, S, M, tau):
    rng = np.random.default_rng(seed)
    base = random_mixture(rng, Kb, S, M, 2)
    cfg = VhemConfig(K_r=Kr, tau=tau, max_iters=30, restarts=1, rng_seed=seed, N_virtual=int(rng.integers(1, 1000)))
    _, state, _ = vhem_reduce(base, cfg)
    trace = np.asarray(state.trace)
    assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[:-1]))
    np.testing.assert_allclose(state.zhat.sum(axis=1), 1.0, atol=1e-12)


def test_empty_cluster_is_reseeded_without_lowering_bound():
    base = H3m.uniform([shifted_hmm(0.0), shifted_hmm(0.1), shifted_hmm(8.0), shifted_hmm(8.2)])
    far = shifted_hmm(100.0)
    init = H3m.uniform([shifted_hmm(4.0), far])
    state = run_vhem(base, init, VhemConfig(K_r=2, max_iters=30))
    trace = np.asarray(state.trace)
    assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[:-1]))
    assert state.reseeds >= 1
    assert rand_index([0, 0, 1, 1], state.zhat.argmax(axis=1)) == 1.0


def test_equal_sizes_give_bijection():
    hmms = [shifted_hmm(6.0 * k) for k in range(5)]
    base = H3m.uniform(hmms)
    L = batch_estep(base.stacked(), base.stacked(), 10).lhmm
    off = L + np.diag(np.full(5, -np.inf))
    assert np.all(np.diag(L) - off.max(axis=1) > 1.0)
    _, _, result = vhem_reduce(base, VhemConfig(K_r=5, rng_seed=1))
    assert sorted(result.assignments) == list(range(5))
    assert rand_index(np.arange(5), result.assignments) == 1.0


def test_reduce_is_deterministic():
    rng = np.random.default_rng(10)
    base = random_mixture(rng, 6, 2, 1, 1)
    a = vhem_reduce(base, VhemConfig(K_r=2, rng_seed=3))
    b = vhem_reduce(base, VhemConfig(K_r=2, rng_seed=3))
    assert a[1].trace == b[1].trace
    np.testing.assert_array_equal(a[2].assignments, b[2].assignments)
