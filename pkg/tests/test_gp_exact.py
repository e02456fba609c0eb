import numpy as np
import pytest

from conftest import gp_condition_oracle, mvn_logpdf
from gpkrig.core import Hyperparams, Kernel, kernel_matrix
from gpkrig.data import RandomFeatureField
from gpkrig.gp_exact import (DegenerateError, FactorizationError, concentrated_tau2, condition,
                             fit_mle, log_likelihood, predict, profile_gradient, profile_loglik)


def _instance(rng, n=30, d=2):
    X = rng.uniform(size=(n, d))
    Y = np.sin(5 * X.sum(axis=1)) + 0.1 * rng.normal(size=n)
    return X, Y - Y.mean()


def test_loglik_trivial_cases():
    far = Kernel.gaussian(1e-6)
    assert log_likelihood(Hyperparams(1.0, 0.0, far), [[0.0]], [0.0]) == pytest.approx(
        -0.5 * np.log(2 * np.pi), abs=1e-14)
    ll = log_likelihood(Hyperparams(1.0, 0.0, far), [[0.0], [10.0]], [1.0, 1.0])
    assert ll == pytest.approx(-np.log(2 * np.pi) - 1.0, abs=1e-14)


def test_loglik_matches_dense_oracle(rng):
    X, Y = _instance(rng, 50)
    phi = Hyperparams(1.3, 0.05, Kernel.gaussian([0.1, 0.3]))
    S = phi.tau2 * (kernel_matrix(phi.kernel, X) + phi.g * np.eye(50))
    assert log_likelihood(phi, X, Y) == pytest.approx(mvn_logpdf(Y, S), rel=1e-9)


def test_loglik_permutation_invariant(rng):
    X, Y = _instance(rng, 20)
    phi = Hyperparams(1.0, 0.1, Kernel.matern(0.2))
    p = rng.permutation(20)
    assert log_likelihood(phi, X[p], Y[p]) == pytest.approx(log_likelihood(phi, X, Y), rel=1e-12)


def test_concentrated_tau2_trivial_and_grid(rng):
    far = Kernel.gaussian(1e-6)
    assert concentrated_tau2(0.0, far, [[0.0]], [2.0]) == pytest.approx(4.0)
    assert concentrated_tau2(0.0, far, [[0.0], [10.0]], [1.0, -1.0]) == pytest.approx(1.0)
    X, Y = _instance(rng, 30)
    k = Kernel.gaussian([0.2, 0.2])
    t = concentrated_tau2(0.1, k, X, Y)
    grid = np.linspace(0.5 * t, 1.5 * t, 2001)
    lls = [log_likelihood(Hyperparams(v, 0.1, k), X, Y) for v in grid]
    assert abs(grid[int(np.argmax(lls))] - t) <= grid[1] - grid[0]


def test_degenerate_tau2():
    with pytest.raises(DegenerateError):
        concentrated_tau2(0.1, Kernel.gaussian(), np.eye(3), np.zeros(3))
    with pytest.raises(DegenerateError):
        fit_mle(np.random.default_rng(0).uniform(size=(5, 1)), np.zeros(5))


@pytest.mark.parametrize("d", [1, 2, 3])
def test_profile_gradient_finite_differences(d, rng):
    for _ in range(10):
        X, Y = _instance(rng, 40, d)
        k = Kernel.gaussian(np.exp(rng.uniform(-3, 0, d)))
        g = float(np.exp(rng.uniform(-5, -1)))
        an = profile_gradient(g, k, X, Y)
        th = k.theta
        z = np.concatenate([[g], th])
        for j in range(len(z)):
            h = 1e-5 * z[j]
            up, dn = z.copy(), z.copy()
            up[j] += h
            dn[j] -= h
            fd = (profile_loglik(up[0], k.with_lengthscales(up[1:]), X, Y)
                  - profile_loglik(dn[0], k.with_lengthscales(dn[1:]), X, Y)) / (2 * h)
            assert abs(an[j] - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_profile_gradient_swaps_with_coordinates(rng):
    X, Y = _instance(rng, 25)
    k = Kernel.gaussian([0.1, 0.3])
    g1 = profile_gradient(0.1, k, X, Y)
    g2 = profile_gradient(0.1, k.with_lengthscales([0.3, 0.1]), X[:, ::-1], Y)
    np.testing.assert_allclose(g1[[0, 2, 1]], g2, rtol=1e-10)


def test_fit_mle_stationary_and_optimal(rng):
    X, Y = _instance(rng, 40)
    fit = fit_mle(X, Y)
    phi = fit.phi_hat
    gr = profile_gradient(phi.g, phi.kernel, X, Y)
    scale = np.concatenate([[phi.g], phi.kernel.theta])
    assert np.max(np.abs(gr * scale)) < 1e-4
    assert fit.loglik == pytest.approx(log_likelihood(phi, X, Y - Y.mean()), rel=1e-10)
    best = profile_loglik(phi.g, phi.kernel, X, Y - Y.mean())
    for _ in range(100):
        z = np.log(scale) + rng.normal(0, 0.5, size=3)
        p = np.clip(np.exp(z), 1e-6, 1e4)
        assert profile_loglik(p[0], phi.kernel.with_lengthscales(p[1:]), X, Y - Y.mean()) <= best + 1e-9


def test_fit_mle_recovers_known_gp():
    # single fits scatter; the median over replicates sits within 25% of the truth
    truth = Hyperparams(1.0, 0.1, Kernel.gaussian(0.5))
    est = []
    for s in range(10):
        rng = np.random.default_rng(s)
        X = rng.uniform(0, 40, size=(400, 1))
        K = truth.tau2 * (kernel_matrix(truth.kernel, X) + truth.g * np.eye(400))
        Y = np.linalg.cholesky(K) @ rng.normal(size=400)
        p = fit_mle(X, Y, restarts=2).phi_hat
        est.append((p.kernel.theta[0], p.g))
    theta, g = np.median(est, axis=0)
    assert theta == pytest.approx(0.5, rel=0.25)
    assert g == pytest.approx(0.1, rel=0.25)


def test_predict_matches_oracle(rng):
    X, Y = _instance(rng, 5)
    phi = Hyperparams(1.4, 0.05, Kernel.gaussian([0.2, 0.5]))
    Xs = rng.uniform(size=(3, 2))
    fit = condition(X, Y, phi, center=False)
    p = predict(fit, Xs, full_cov=True)
    Sxx = phi.tau2 * (kernel_matrix(phi.kernel, X) + phi.g * np.eye(5))
    Ssx = phi.tau2 * kernel_matrix(phi.kernel, Xs, X)
    Sss = phi.tau2 * (kernel_matrix(phi.kernel, Xs) + phi.g * np.eye(3))
    mu, C = gp_condition_oracle(Sxx, Ssx, Sss, Y)
    np.testing.assert_allclose(p.mean, mu, atol=1e-10)
    np.testing.assert_allclose(p.cov, C, atol=1e-10)
    np.testing.assert_allclose(p.var, predict(fit, Xs).var, atol=1e-12)
    lat = predict(fit, Xs, latent=True)
    np.testing.assert_allclose(p.var - lat.var, phi.tau2 * phi.g, atol=1e-12)


def test_predict_interpolates_and_reverts(rng):
    X, Y = _instance(rng, 8)
    fit = condition(X, Y, Hyperparams(1.0, 0.0, Kernel.gaussian(0.05)), center=False)
    p = predict(fit, X)
    np.testing.assert_allclose(p.mean, Y, atol=1e-6)
    np.testing.assert_allclose(p.var, 0.0, atol=1e-6)
    far = predict(fit, np.full((1, 2), 100.0), latent=True)
    assert far.mean[0] == pytest.approx(0.0, abs=1e-12)
    assert far.var[0] == pytest.approx(1.0, abs=1e-12)


def test_predict_dimension_error(rng):
    X, Y = _instance(rng, 8)
    fit = condition(X, Y, Hyperparams(1.0, 0.1, Kernel.gaussian(0.1)))
    with pytest.raises(ValueError):
        predict(fit, np.zeros((2, 3)))


def test_nonpd_raises():
    X = np.zeros((3, 1))
    with pytest.raises(FactorizationError):
        log_likelihood(Hyperparams(1.0, 0.0, Kernel.gaussian()), X, np.ones(3))
