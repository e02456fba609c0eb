import numpy as np
import pytest
from scipy import stats

from conftest import gp_draw
from gpkrig.censoring import (GP, LAGP, SLAGP, SVECCHIA, ImputationRun, impute_gp, impute_lagp,
                              impute_vecchia, mixture_moments, multiple_impute,
                              collapse_flat_boreholes, sample_truncated_normal)
from gpkrig.core import Hyperparams, Kernel
from gpkrig.data import CensorSpec, Dataset
from gpkrig.gp_exact import PredictiveDistribution, condition, predict
from gpkrig.lagp import LAGPConfig, lagp_predict_one
from gpkrig.locality import NN
from gpkrig.vecchia import (VecchiaFit, build_conditioning_sets, vecchia_predict,
                            with_training)

PHI = Hyperparams(1.0, 0.05, Kernel.gaussian(0.05))


def _vfit(phi, X, Y, m):
    cs = build_conditioning_sets(X / np.sqrt(phi.kernel.theta), m)
    ym = float(np.mean(Y))
    return VecchiaFit(phi, cs, X, Y - ym, ym, m, float("nan"))


def _censored_field(rng, n=200, frac=0.4, d=2):
    X = rng.uniform(size=(n, d))
    y = gp_draw(X, PHI, rng)
    thr = np.quantile(y, frac)
    c = y <= thr
    return X[~c], y[~c], X[c], np.full(c.sum(), thr), y[c]


# truncated normal

def test_truncated_half_normal_mean():
    x = sample_truncated_normal(np.zeros(200000), 1.0, 0.0, np.random.default_rng(1))
    ref = stats.truncnorm(-np.inf, 0.0).mean()
    assert ref == pytest.approx(-np.sqrt(2 / np.pi))
    assert abs(x.mean() - ref) < 0.01
    assert np.all(x <= 0.0)


def test_far_bound_leaves_distribution_unchanged():
    mu, sd = 3.0, 2.0
    x = sample_truncated_normal(np.full(100000, mu), sd ** 2, mu + 10 * sd, np.random.default_rng(2))
    assert abs(x.mean() - mu) < 0.02 * sd
    assert np.all(x <= mu + 10 * sd)


def test_deep_tail_bounds_are_finite_and_respected():
    rng = np.random.default_rng(3)
    bound = np.array([-10.0, -40.0, -1e3])
    x = sample_truncated_normal(np.zeros(3), 1.0, bound, rng)
    assert np.all(np.isfinite(x)) and np.all(x <= bound)
    # exponential tail: excess below the bound is about 1/|bound|
    ex = bound[1] - sample_truncated_normal(np.zeros(20000), 1.0, -40.0, rng)
    assert ex.mean() == pytest.approx(1 / 40, rel=0.05)


def test_truncated_matches_scipy_distribution():
    rng = np.random.default_rng(4)
    x = sample_truncated_normal(np.full(5000, 1.0), 4.0, 0.5, rng)
    ref = stats.truncnorm(-np.inf, (0.5 - 1.0) / 2.0, loc=1.0, scale=2.0)
    assert stats.kstest(x, ref.cdf).pvalue > 0.01


def test_lower_direction_mirrors_upper():
    a = sample_truncated_normal(np.zeros(5), 1.0, 0.3, np.random.default_rng(7), "lower")
    b = sample_truncated_normal(np.zeros(5), 1.0, -0.3, np.random.default_rng(7), "upper")
    np.testing.assert_allclose(a, -b)
    assert np.all(a >= 0.3)
    with pytest.raises(ValueError):
        sample_truncated_normal(0.0, 0.0, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_truncated_normal(0.0, 1.0, 1.0, np.random.default_rng(0), "sideways")


# sequential and epoch imputation

def test_no_censored_sites_gives_empty_output(rng):
    X = rng.uniform(size=(20, 1))
    out = impute_lagp(X, rng.normal(size=20), np.empty((0, 1)), [], LAGPConfig(m=10), rng)
    assert out.values.size == 0
    with pytest.raises(ValueError):
        impute_lagp(np.empty((0, 1)), [], X[:1], [0.0], LAGPConfig(m=10), rng)


def test_lagp_loose_threshold_draws_from_local_predictive(rng):
    X = rng.uniform(size=(30, 1))
    Y = gp_draw(X, PHI, rng)
    cfg = LAGPConfig(m=10, method=NN)
    x = np.array([[0.5]])
    ref = lagp_predict_one(X, Y, x[0], cfg)
    draws = [impute_lagp(X, Y, x, [ref.mean + 50.0], cfg, np.random.default_rng(s)).values[0]
             for s in range(1000)]
    assert stats.kstest(draws, stats.norm(ref.mean, np.sqrt(ref.var)).cdf).pvalue > 0.01


@pytest.mark.parametrize("engine", [GP, LAGP, SLAGP, SVECCHIA])
def test_all_engines_respect_thresholds(rng, engine):
    Xo, Yo, Xc, thr, _ = _censored_field(rng)
    run = multiple_impute(Xo, Yo, Xc, thr, Xc[:5], M=2, engine=engine, rng=rng,
                          lagp_config=LAGPConfig(m=20), vecchia_m=10, gp_restarts=0)
    assert run.M == 2
    for vals in run.imputed:
        assert np.all(vals <= thr)
    # separate streams give different imputations
    assert not np.array_equal(run.imputed[0], run.imputed[1])


def test_lagp_failure_falls_back_to_threshold(rng):
    X = rng.uniform(size=(20, 1))
    Y = np.ones(20)
    out = impute_lagp(X, Y, [[0.5]], [0.0], LAGPConfig(m=10, method=NN), rng)
    assert out.values[0] == 0.0 and out.fallback[0]


def test_vecchia_infinite_thresholds_accept_in_one_epoch(rng):
    Xo, Yo, Xc, thr, _ = _censored_field(rng)
    out = impute_vecchia(Xo, Yo, Xc, np.full(len(Xc), np.inf), _vfit(PHI, Xo, Yo, 10), rng)
    assert out.epochs == [len(Xc), 0]
    assert not out.fallback.any()


def test_vecchia_epoch_counts_decrease(rng):
    Xo, Yo, Xc, thr, _ = _censored_field(rng, frac=0.5)
    out = impute_vecchia(Xo, Yo, Xc, thr, _vfit(PHI, Xo, Yo, 10), rng)
    e = out.epochs
    # an epoch may accept nothing once only deep-tail sites remain
    assert all(b <= a for a, b in zip(e, e[1:]))
    assert e[1] < e[0] and e[-1] == 0 and np.all(out.values <= thr)


def test_vecchia_epoch_cap_uses_truncated_fallback(rng):
    Xo, Yo, Xc, _, _ = _censored_field(rng)
    deep = np.full(len(Xc), -8.0)
    out = impute_vecchia(Xo, Yo, Xc, deep, _vfit(PHI, Xo, Yo, 10), rng, epoch_cap=3)
    assert out.fallback.all() and np.all(out.values <= deep)


def test_vecchia_single_site_marginal(rng):
    X = rng.uniform(size=(60, 2))
    Y = gp_draw(X, PHI, rng)
    vf = _vfit(PHI, X, Y, 10)
    site = np.array([[0.5, 0.5]])
    p = vecchia_predict(with_training(vf, X, Y), site, joint=False)
    thr = p.mean[0]
    draws = [impute_vecchia(X, Y, site, [thr], vf, np.random.default_rng(s)).values[0]
             for s in range(1000)]
    ref = stats.truncnorm(-np.inf, 0.0, loc=p.mean[0], scale=np.sqrt(p.var[0]))
    assert stats.kstest(draws, ref.cdf).pvalue > 0.01


def test_gp_imputation_conditions_sequentially(rng):
    Xo = rng.uniform(size=(15, 1))
    Yo = gp_draw(Xo, PHI, rng)
    Xc = np.array([[0.3], [0.31]])
    out = impute_gp(Xo, Yo, Xc, [np.inf, np.inf], PHI, np.random.default_rng(9), order="given")
    # replay: second draw conditions on the first
    r = np.random.default_rng(9)
    p1 = predict(condition(Xo, Yo, PHI, y_mean=float(np.mean(Yo))), Xc[:1])
    v1 = sample_truncated_normal(p1.mean[0], p1.var[0], np.inf, r)
    p2 = predict(condition(np.vstack([Xo, Xc[:1]]), np.append(Yo, v1), PHI,
                           y_mean=float(np.mean(Yo))), Xc[1:])
    v2 = sample_truncated_normal(p2.mean[0], p2.var[0], np.inf, r)
    np.testing.assert_allclose(out.values, [v1, v2], rtol=1e-12)


# multiple imputation

def test_single_imputation_without_censoring_is_plain_prediction(rng):
    X = rng.uniform(size=(40, 1))
    Y = gp_draw(X, PHI, rng)
    Xs = rng.uniform(size=(5, 1))
    vf = _vfit(PHI, X, Y, 10)
    run = multiple_impute(X, Y, np.empty((0, 1)), [], Xs, M=1, engine=SVECCHIA, rng=rng,
                          vecchia_fit=vf)
    ref = vecchia_predict(with_training(vf, X, Y), Xs, joint=False)
    np.testing.assert_array_equal(run.preds[0].mean, ref.mean)
    mu, var = mixture_moments(run)
    np.testing.assert_array_equal(mu, ref.mean)
    np.testing.assert_allclose(var, ref.var)


def test_infinite_thresholds_reproduce_direct_prediction_in_expectation(rng):
    X = rng.uniform(size=(50, 1))
    Y = gp_draw(X, PHI, rng)
    Xo, Yo, Xc = X[:35], Y[:35], X[35:]
    Xs = rng.uniform(size=(4, 1))
    vf = _vfit(PHI, Xo, Yo, 60)  # full conditioning: the Vecchia predictive is exact
    run = multiple_impute(Xo, Yo, Xc, np.full(15, np.inf), Xs, M=300, engine=SVECCHIA,
                          rng=rng, vecchia_fit=vf)
    direct = vecchia_predict(with_training(vf, Xo, Yo), Xs, joint=False)
    mu = np.vstack([p.mean for p in run.preds])
    se = mu.std(axis=0, ddof=1) / np.sqrt(run.M)
    assert np.all(np.abs(mu.mean(axis=0) - direct.mean) < 4 * se + 1e-12)
    # total variance matches too
    _, var = mixture_moments(run)
    np.testing.assert_allclose(var, direct.var, rtol=0.15)


def test_multiple_impute_rejects_bad_arguments(rng):
    X = rng.uniform(size=(10, 1))
    with pytest.raises(ValueError):
        multiple_impute(X, X[:, 0], X[:1], [0.0], X[:1], M=0)
    with pytest.raises(ValueError):
        multiple_impute(X, X[:, 0], X[:1], [0.0], X[:1], engine="mcmc")


def test_toy_imputation_moves_fit_toward_truth():
    from gpkrig.data import CENSORED_TOY, gen_synthetic_1d
    wins = 0
    grid = np.linspace(0, 1, 201)[:, None]
    for s in range(10):
        r = np.random.default_rng(100 + s)
        ds, f = gen_synthetic_1d(20, 0.1, threshold=1.0, variant=CENSORED_TOY, rng=r)
        c = ds.censor.censored
        run = multiple_impute(ds.X[~c], ds.Y[~c], ds.X[c], ds.censor.threshold[c], grid, M=5,
                              engine=GP, rng=r, gp_restarts=2)
        from gpkrig.gp_exact import fit_mle
        base = predict(fit_mle(ds.X, ds.Y, restarts=2), grid).mean
        mu, _ = mixture_moments(run)
        region = f(grid[:, 0]) <= 1.0
        e_imp = np.sqrt(np.mean((mu - f(grid[:, 0]))[region] ** 2))
        e_base = np.sqrt(np.mean((base - f(grid[:, 0]))[region] ** 2))
        wins += e_imp < e_base
    assert wins >= 8


# mixture moments

def _run(mus, vars_):
    preds = [PredictiveDistribution(np.atleast_1d(m), np.atleast_1d(v)) for m, v in zip(mus, vars_)]
    return ImputationRun("gp", [], preds, [])


def test_mixture_examples():
    mu, var = mixture_moments(_run([0.0, 2.0], [1.0, 1.0]))
    assert mu[0] == 1.0 and var[0] == 2.0
    mu, var = mixture_moments(_run([0.7] * 4, [0.3] * 4))
    assert mu[0] == pytest.approx(0.7) and var[0] == pytest.approx(0.3)
    with pytest.raises(ValueError):
        mixture_moments([])


def test_mixture_moments_match_monte_carlo():
    r = np.random.default_rng(11)
    mus, vs = r.normal(size=5), r.uniform(0.2, 2.0, 5)
    comp = r.integers(0, 5, 10 ** 6)
    z = r.normal(mus[comp], np.sqrt(vs[comp]))
    mu, var = mixture_moments(_run(mus, vs))
    assert z.mean() == pytest.approx(mu[0], abs=0.01 * np.sqrt(var[0]))
    assert z.var() == pytest.approx(var[0], rel=0.01)


def test_mixture_variance_at_least_mean_component_variance(rng):
    for _ in range(50):
        M = rng.integers(1, 8)
        mus, vs = rng.normal(size=(M, 4)), rng.uniform(0.1, 3, (M, 4))
        run = ImputationRun("gp", [], [PredictiveDistribution(a, b) for a, b in zip(mus, vs)], [])
        _, var = mixture_moments(run)
        assert np.all(var >= vs.mean(axis=0) - 1e-12)
        _, v2 = mixture_moments(run, at=[1, 3])
        np.testing.assert_array_equal(v2, var[[1, 3]])


# flat holes

def _holes(rng):
    z = np.linspace(1.0, 0.0, 40)
    X1 = np.column_stack([np.full(40, 0.2), np.full(40, 0.3), z])
    X2 = np.column_stack([np.full(5, 0.6), np.full(5, 0.6), np.linspace(1, 0.5, 5)])
    X3 = np.column_stack([np.full(3, 0.9), np.full(3, 0.1), [0.9, 0.5, 0.1]])
    X = np.vstack([X1, X2, X3])
    Y = np.concatenate([np.full(40, 0.05), rng.normal(size=5), np.full(3, 0.05)])
    ids = np.array(["A"] * 40 + ["B"] * 5 + ["C"] * 3, dtype=object)
    c = Y == 0.05
    perm = rng.permutation(len(Y))
    return Dataset(X[perm], Y[perm], ids[perm], CensorSpec(c[perm], np.where(c, 0.05, np.nan)[perm]))


def test_collapse_flat_holes(rng):
    ds = _holes(rng)
    out = collapse_flat_boreholes(ds)
    ids = out.hole_id.astype(str)
    assert (ids == "A").sum() == 3
    assert (ids == "B").sum() == 5 and (ids == "C").sum() == 3
    za = np.sort(out.X[ids == "A", 2])
    assert za[0] == 0.0 and za[2] == 1.0 and abs(za[1] - 0.5) < 0.02
    assert np.all(out.Y[ids == "A"] == 0.05)
    assert out.censor.censored[ids == "A"].all()


def test_collapse_is_idempotent(rng):
    once = collapse_flat_boreholes(_holes(rng))
    twice = collapse_flat_boreholes(once)
    np.testing.assert_array_equal(once.X, twice.X)
    np.testing.assert_array_equal(once.Y, twice.Y)
