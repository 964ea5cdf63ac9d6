import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from h3mcluster.gaussian import (
    GMM,
    CovarianceError,
    Gaussian,
    expected_gauss_ll,
    floor_covariance,
    gaussian_logpdf,
    gmm_lower_bound,
    gmm_variational_estep,
    pairwise_expected_loglik,
)

# E_{N(0.3, 0.7)}[log N(y; -0.5, 1.3)] by adaptive quadrature
QUAD_GAUSS_1D = -1.5655052808230334
# E_{base}[log reduced(y)] for the two 1-d GMMs below, by adaptive quadrature
QUAD_GMM_1D = -2.283308952507054


def random_spd(rng, d, scale=1.0):
    a = rng.normal(size=(d, d))
    return scale * (a @ a.T / d + 0.3 * np.eye(d))


def gmm_1d(c, m, v):
    return GMM(c, np.asarray(m, float)[:, None], np.asarray(v, float)[:, None, None])


def test_closed_form_matches_quadrature():
    val = expected_gauss_ll(Gaussian([0.3], [[0.7]]), Gaussian([-0.5], [[1.3]]))
    assert val == pytest.approx(QUAD_GAUSS_1D, abs=1e-12)


def test_self_expectation_is_negative_entropy():
    rng = np.random.default_rng(1)
    for d in (1, 2, 4):
        cov = random_spd(rng, d)
        g = Gaussian(rng.normal(size=d), cov)
        entropy = multivariate_normal(g.mean, cov).entropy()
        assert expected_gauss_ll(g, g) == pytest.approx(-entropy, rel=1e-12)


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        expected_gauss_ll(Gaussian([0.0], [[1.0]]), Gaussian([0.0, 0.0], np.eye(2)))


def test_singular_reduced_covariance_raises():
    with pytest.raises(CovarianceError):
        expected_gauss_ll(Gaussian([0.0, 0.0], np.eye(2)), Gaussian([0.0, 0.0], np.zeros((2, 2))))


def test_asymmetric_covariance_rejected():
    with pytest.raises(CovarianceError):
        Gaussian([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


def test_pairwise_table_matches_scalar_calls():
    rng = np.random.default_rng(2)
    d = 3
    mb, cb = rng.normal(size=(4, d)), np.stack([random_spd(rng, d) for _ in range(4)])
    mr, cr = rng.normal(size=(2, d)), np.stack([random_spd(rng, d) for _ in range(2)])
    table = pairwise_expected_loglik(mb, cb, mr, cr)
    for i in range(4):
        for j in range(2):
            ref = expected_gauss_ll(Gaussian(mb[i], cb[i]), Gaussian(mr[j], cr[j]))
            assert table[i, j] == pytest.approx(ref, rel=1e-13)


def test_logpdf_matches_scipy():
    rng = np.random.default_rng(3)
    for d in (1, 3):
        means = rng.normal(size=(2, d))
        covs = np.stack([random_spd(rng, d) for _ in range(2)])
        x = rng.normal(size=(7, d))
        out = gaussian_logpdf(x, means, covs)
        for k in range(2):
            np.testing.assert_allclose(out[:, k], multivariate_normal(means[k], covs[k]).logpdf(x), rtol=1e-12)


def test_gmm_bound_below_quadrature_and_estep_optimal():
    base = gmm_1d([0.3, 0.7], [-1, 2], [0.5, 1.5])
    red = gmm_1d([0.6, 0.4], [0, 1.5], [1, 0.8])
    eta = gmm_variational_estep(base, red)
    best = gmm_lower_bound(base, red, eta)
    assert best <= QUAD_GMM_1D
    rng = np.random.default_rng(4)
    for _ in range(20):
        other = rng.dirichlet(np.ones(2), size=2)
        assert gmm_lower_bound(base, red, other) <= best + 1e-12


def test_gmm_bound_exact_for_single_component():
    base = gmm_1d([1.0], [0.3], [0.7])
    red = gmm_1d([1.0], [-0.5], [1.3])
    eta = gmm_variational_estep(base, red)
    assert eta.shape == (1, 1) and eta[0, 0] == 1.0
    assert gmm_lower_bound(base, red, eta) == pytest.approx(QUAD_GAUSS_1D, abs=1e-12)


def test_gmm_weights_validated():
    with pytest.raises(ValueError):
        gmm_1d([0.5, 0.6], [0, 1], [1, 1])


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    mb=st.integers(1, 3),
    mr=st.integers(1, 3),
    d=st.integers(1, 3),
)
def test_estep_rows_are_distributions(seed, mb, mr, d):
    rng = np.random.default_rng(seed)
    base = GMM(rng.dirichlet(np.ones(mb)), rng.normal(size=(mb, d)),
               np.stack([random_spd(rng, d) for _ in range(mb)]))
    red = GMM(rng.dirichlet(np.ones(mr)), rng.normal(size=(mr, d)),
              np.stack([random_spd(rng, d) for _ in range(mr)]))
    eta = gmm_variational_estep(base, red)
    assert eta.shape == (mb, mr)
    assert np.all(eta >= 0)
    np.testing.assert_allclose(eta.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), d=st.integers(1, 4), floor=st.floats(1e-6, 1.0))
def test_floor_covariance_clips_eigenvalues(seed, d, floor):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(d, d))
    cov = a @ np.diag(rng.uniform(-1, 2, size=d)) @ a.T
    out = floor_covariance(cov, floor)
    np.testing.assert_allclose(out, out.T, atol=0)
    assert np.linalg.eigvalsh(out).min() >= floor * (1 - 1e-9)
