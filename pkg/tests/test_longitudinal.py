import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flashjm.data import MarkerSeries, ModelParams, SubjectRecord, build_designs
from flashjm.longitudinal import (batch_posterior, jittered, long_stats, marginal_loglik_Y,
                                  posterior_b, sigma_diag)

LOG_2PI = np.log(2 * np.pi)


def params_for(L, K=1, beta=None, D=None, phi=None):
    return ModelParams(np.zeros((K, 0)),
                       np.zeros((K, 2 * L)) if beta is None else beta,
                       np.ones(L) if phi is None else phi,
                       np.eye(2 * L) if D is None else D,
                       np.zeros(0), np.zeros((K, L)))


def random_instance(rng, L, max_obs=3, K=1):
    series = []
    for _ in range(L):
        n = rng.integers(1, max_obs + 1)
        t = np.sort(rng.uniform(0, 3, n))
        series.append(MarkerSeries(t, rng.normal(0, 1.5, n)))
    sub = SubjectRecord("s", [], tuple(series), 3.0, False)
    A = rng.standard_normal((2 * L, 2 * L))
    D = A @ A.T / (2 * L) + 0.3 * np.eye(2 * L)
    par = params_for(L, K, rng.normal(0, 0.5, (K, 2 * L)), D, rng.uniform(0.5, 2.0, L))
    return sub, par


def test_sigma_diag():
    sub = SubjectRecord("a", [], (MarkerSeries([0.0, 1.0], [0, 0]), MarkerSeries([0.5], [0])),
                        2.0, False)
    assert np.diag(sigma_diag(sub, [0.5, 2.0])).tolist() == [0.5, 0.5, 2.0]
    empty = SubjectRecord("e", [], (MarkerSeries.empty(),), 1.0, False)
    assert sigma_diag(empty, [1.0]).shape == (0, 0)
    one = SubjectRecord("o", [], (MarkerSeries([0.0, 1.0, 2.0], [0, 0, 0]),), 2.0, False)
    np.testing.assert_array_equal(sigma_diag(one, [1.0]), np.eye(3))


def test_scalar_marginal_density():
    sub = SubjectRecord("a", [], (MarkerSeries([0.0], [0.0]),), 1.0, False)
    par = params_for(1, D=np.zeros((2, 2)))
    assert marginal_loglik_Y(sub, 0, par) == pytest.approx(-0.5 * LOG_2PI, abs=1e-7)


def test_empty_subject():
    sub = SubjectRecord("a", [], (MarkerSeries.empty(),), 1.0, False)
    D = np.array([[2.0, 0.3], [0.3, 1.0]])
    par = params_for(1, D=D)
    assert marginal_loglik_Y(sub, 0, par) == 0.0
    post = posterior_b(sub, 0, par)
    assert not np.any(post.O)
    np.testing.assert_allclose(post.W, D, rtol=1e-7)


def test_scalar_posterior():
    # one observation at time 0 makes the slope effect irrelevant: V row (1, 0)
    sub = SubjectRecord("a", [], (MarkerSeries([0.0], [2.0]),), 1.0, False)
    post = posterior_b(sub, 0, params_for(1))
    assert post.W[0, 0] == pytest.approx(0.5, rel=1e-7)
    assert post.O[0] == pytest.approx(1.0, rel=1e-7)


def test_location_invariance():
    rng = np.random.default_rng(0)
    sub, par = random_instance(rng, 2)
    a = marginal_loglik_Y(sub, 0, par)
    shifted = SubjectRecord("s", [], tuple(MarkerSeries(m.times, m.values + 3.0)
                                           for m in sub.markers), 3.0, False)
    par2 = par.copy()
    par2.beta[0, 0::2] += 3.0
    assert marginal_loglik_Y(shifted, 0, par2) == pytest.approx(a, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2), st.integers(0, 2 ** 32 - 1))
def test_more_noise_moves_posterior_toward_prior(L, seed):
    rng = np.random.default_rng(seed)
    sub, par = random_instance(rng, L)
    W1 = posterior_b(sub, 0, par).W
    par2 = par.copy()
    par2.phi = 2 * par.phi
    W2 = posterior_b(sub, 0, par2).W
    Dj = jittered(par.D)
    assert np.linalg.eigvalsh(W2 - W1).min() >= -1e-10
    assert np.linalg.eigvalsh(Dj - W2).min() >= -1e-10


def test_covariance_independent_of_class():
    rng = np.random.default_rng(1)
    sub, par = random_instance(rng, 2, K=3)
    W = [posterior_b(sub, k, par).W for k in range(3)]
    assert np.array_equal(W[0], W[1]) and np.array_equal(W[0], W[2])
    bp = batch_posterior(long_stats([sub]), par.beta, par.D, par.phi)
    assert bp.W.shape == (1, 4, 4)


def _log_f_y_given_b(sub, par, draws):
    des = build_designs(sub)
    mean = (des.U @ par.beta[0])[:, None] + des.V @ draws.T
    var = np.diag(sigma_diag(sub, par.phi))[:, None]
    return -0.5 * np.sum(LOG_2PI + np.log(var) + (des.y[:, None] - mean) ** 2 / var, axis=0)


@pytest.mark.parametrize("seed", range(4))
def test_monte_carlo_marginal_and_posterior(seed):
    rng = np.random.default_rng(100 + seed)
    L = 1 + seed % 2
    sub, par = random_instance(rng, L)
    draws = rng.multivariate_normal(np.zeros(2 * L), par.D, size=1_000_000)
    lw = _log_f_y_given_b(sub, par, draws)
    m = lw.max()
    w = np.exp(lw - m)
    lik_mc, lik_se = w.mean(), w.std() / np.sqrt(w.size)
    lik = np.exp(marginal_loglik_Y(sub, 0, par) - m)
    assert abs(lik - lik_mc) < 3 * lik_se
    # self-normalized importance sampling of the posterior mean
    wn = w / w.sum()
    mean_is = wn @ draws
    se = np.sqrt(np.sum(wn[:, None] ** 2 * (draws - mean_is) ** 2, axis=0))
    post = posterior_b(sub, 0, par)
    assert np.all(np.abs(post.O - mean_is) < 3 * se)
    cov_is = (draws - mean_is).T @ (wn[:, None] * (draws - mean_is))
    np.testing.assert_allclose(post.W, cov_is, atol=0.05 * np.abs(post.W).max())


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_batch_matches_dense(L, K, seed):
    rng = np.random.default_rng(seed)
    subs = []
    for i in range(3):
        series = []
        for _ in range(L):
            n = rng.integers(0, 4)
            series.append(MarkerSeries(np.sort(rng.uniform(0, 3, n)), rng.standard_normal(n)))
        subs.append(SubjectRecord(str(i), [], tuple(series), 3.0, False))
    _, par = random_instance(rng, L, K=K)
    bp = batch_posterior(long_stats(subs), par.beta, par.D, par.phi)
    for i, s in enumerate(subs):
        for k in range(K):
            post = posterior_b(s, k, par)
            np.testing.assert_allclose(bp.O[i, k], post.O, rtol=1e-8, atol=1e-10)
            np.testing.assert_allclose(bp.W[i], post.W, rtol=1e-8, atol=1e-10)
            # the dense path also ridges the marginal covariance by 1e-8 of its trace
            assert bp.loglik[i, k] == pytest.approx(marginal_loglik_Y(s, k, par), rel=1e-6)
