import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import gp_draw, mvn_logpdf
from gpkrig.data import gen_synthetic_boreholes
from gpkrig.core import Hyperparams, Kernel
from gpkrig.evaluation import (GP, LAGP, OK, SUBSET, SVECCHIA, CVConfig, borehole_folds,
                               holdout_assignment, log_loss_censored, rmse, run_cv, score_full,
                               score_pointwise, subset_gp, substream)
from gpkrig.gp_exact import fit_mle, predict
from gpkrig.lagp import LAGPConfig


def test_rmse_examples(rng):
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))
    y, m = rng.normal(size=50), rng.normal(size=50)
    ref = (sum((a - b) ** 2 for a, b in zip(y, m)) / 50) ** 0.5
    assert rmse(y, m) == pytest.approx(ref, rel=1e-14)
    p = rng.permutation(50)
    assert rmse(y[p], m[p]) == pytest.approx(rmse(y, m), rel=1e-14)
    with pytest.raises(ValueError):
        rmse([1, 2], [1])
    with pytest.raises(ValueError):
        rmse([], [])


def test_score_identities(rng):
    assert score_full(np.zeros(4), np.zeros(4), np.eye(4)) == 0.0
    y, mu = rng.normal(size=6), rng.normal(size=6)
    v = rng.uniform(0.2, 3.0, 6)
    assert score_full(y, mu, np.diag(v)) == pytest.approx(score_pointwise(y, mu, v), rel=1e-13)
    for _ in range(10):
        A = rng.normal(size=(8, 8))
        S = A @ A.T + 0.5 * np.eye(8)
        y, mu = rng.normal(size=8), rng.normal(size=8)
        ref = 2 * mvn_logpdf(y - mu, S) + 8 * np.log(2 * np.pi)
        assert score_full(y, mu, S) == pytest.approx(ref, rel=1e-10)


def test_score_errors():
    with pytest.raises(ValueError):
        score_full([0, 0], [0, 0], np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        score_full([0, 0], [0, 0], np.eye(3))
    with pytest.raises(ValueError):
        score_pointwise([0.0], [0.0], [0.0])


def test_log_loss_examples():
    assert log_loss_censored([1.0, 2.0], [1.0, 2.0], [1.0, 4.0]) == pytest.approx(np.log(2))
    assert log_loss_censored([0.0], [-50.0], [1.0]) == pytest.approx(0.0, abs=1e-12)
    z02, z001 = stats.norm.ppf(0.2), stats.norm.ppf(0.001)
    assert log_loss_censored([z02], [0.0], [1.0]) == pytest.approx(1.6, abs=0.01)
    assert log_loss_censored([z001], [0.0], [1.0]) == pytest.approx(6.9, abs=0.01)
    assert log_loss_censored([-z02], [0.0], [1.0], "lower") == pytest.approx(-np.log(0.2))


@settings(max_examples=200, deadline=None)
@given(t=st.floats(-1e6, 1e6), m=st.floats(-1e6, 1e6), v=st.floats(1e-10, 1e6))
def test_log_loss_finite_in_the_tails(t, m, v):
    ll = log_loss_censored([t], [m], [v])
    assert np.isfinite(ll) and ll >= 0


def test_equal_holes_split_evenly():
    ids = np.repeat([f"h{i}" for i in range(20)], 7)
    f = borehole_folds(ids, 10, np.random.default_rng(0))
    assert np.all(f.fold_sizes() == 14)
    assert np.all(np.bincount(f.hole_fold) == 2)


def test_fold_balance_and_no_leakage():
    for s in range(20):
        r = np.random.default_rng(s)
        counts = r.integers(20, 61, 200)
        ids = np.repeat([f"H{i:03d}" for i in range(200)], counts)[r.permutation(counts.sum())]
        f = borehole_folds(ids, 10, r)
        sizes = f.fold_sizes()
        assert sizes.max() - sizes.min() <= 0.2 * sizes.mean()
        for k in range(10):
            test = f.test_mask(k)
            assert not set(ids[test]) & set(ids[~test])
        hole_of = dict(zip(f.holes, f.hole_fold))
        assert all(hole_of[h] == k for h, k in zip(ids, f.record_fold))


def test_fold_errors():
    with pytest.raises(ValueError):
        borehole_folds(["a", "b"], 3)
    with pytest.raises(ValueError):
        borehole_folds(["a", "b"], 0)
    with pytest.raises(ValueError):
        holdout_assignment([True, False], ["a", "a"])


def test_substreams_are_stable_and_distinct():
    a = substream(7, "folds").random(3)
    assert np.array_equal(a, substream(7, "folds").random(3))
    assert not np.array_equal(a, substream(7, "gp", 0).random(3))
    assert not np.array_equal(substream(7, "gp", 0).random(3), substream(7, "gp", 1).random(3))


def _small_ds(n_holes=30, censor_frac=0.0, seed=3):
    truth = Hyperparams(1.0, 0.05, Kernel.gaussian([0.05, 0.05, 0.02]))
    return gen_synthetic_boreholes(n_holes, 8, gp_truth=truth, censor_frac=censor_frac,
                                   n_features=500, rng=np.random.default_rng(seed))


def test_holdout_reduces_to_single_split(rng):
    ds = _small_ds()
    test = rng.uniform(size=ds.n) < 0.1
    folds = holdout_assignment(test)
    res = run_cv(ds, [GP], CVConfig(K=1), seed=1, folds=folds)
    assert len(res.records) == 1
    fit = fit_mle(ds.X[~test], ds.Y[~test])
    p = predict(fit, ds.X[test])
    assert res.records[0].rmse == pytest.approx(rmse(ds.Y[test], p.mean), rel=1e-12)
    assert res.records[0].score_p == pytest.approx(score_pointwise(ds.Y[test], p.mean, p.var),
                                                   rel=1e-10)


def test_subset_with_all_points_is_the_full_gp():
    ds = _small_ds()
    res = run_cv(ds, [SUBSET, GP], CVConfig(K=3, subset_m=10 ** 6), seed=2)
    sub = [r for r in res.records if r.model == SUBSET]
    full = [r for r in res.records if r.model == GP]
    for a, b in zip(sub, full):
        assert a.rmse == b.rmse and a.score_p == b.score_p and a.score_f == b.score_f
        assert a.score_f is not None


def test_subset_gp(rng):
    X = rng.uniform(size=(50, 2))
    Y = rng.normal(size=50)
    assert subset_gp(X, Y, 50, rng).n == 50
    assert subset_gp(X, Y, 20, rng).n == 20
    with pytest.raises(ValueError):
        subset_gp(X, Y, 51, rng)


def test_small_subsets_do_worse_than_the_full_gp():
    worse = []
    for s in range(8):
        r = np.random.default_rng(s)
        X = r.uniform(size=(450, 2))
        Y = gp_draw(X, Hyperparams(1.0, 0.01, Kernel.gaussian(0.02)), r)
        full = predict(fit_mle(X[:400], Y[:400]), X[400:]).mean
        sub = predict(subset_gp(X[:400], Y[:400], 60, r), X[400:]).mean
        worse.append(rmse(Y[400:], sub) - rmse(Y[400:], full))
    assert np.mean(worse) > 0


def test_cv_shares_folds_and_reports_every_model(tmp_path):
    ds = _small_ds(censor_frac=0.3)
    cfg = CVConfig(K=3, lagp=LAGPConfig(m=20), vecchia_m=10, ok_neighbors=20)
    res = run_cv(ds, [GP, LAGP, SVECCHIA, OK], cfg, seed=5)
    again = run_cv(ds, [GP], cfg, seed=5)
    assert np.array_equal(res.folds.record_fold, again.folds.record_fold)
    assert [r.rmse for r in res.records if r.model == GP] == [r.rmse for r in again.records]
    for r in res.records:
        assert r.rmse >= 0 and r.fit_seconds >= 0 and r.predict_seconds >= 0
        assert r.n_train + r.n_test == ds.n
        if r.model == OK:
            assert r.score_p is None and r.log_loss is None
        else:
            assert r.log_loss is not None and r.log_loss >= 0
    summ = res.summary()
    assert set(summ) == {GP, LAGP, SVECCHIA, OK}
    assert summ[GP]["folds"] == 3
    res.to_json(tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    assert "fit_seconds" not in d["folds"][0] and len(d["folds"]) == 12
    res.to_json(tmp_path / "t.json", timing=True)
    assert "fit_seconds" in json.loads((tmp_path / "t.json").read_text())["folds"][0]
    res.to_csv(tmp_path / "m.csv")
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 13


def test_cv_imputation_path():
    ds = _small_ds(censor_frac=0.3)
    cfg = CVConfig(K=3, impute=True, M=2, vecchia_m=10)
    res = run_cv(ds, [SVECCHIA], cfg, seed=5)
    assert all(r.log_loss is not None and np.isfinite(r.log_loss) for r in res.records)


def test_cv_rejects_unknown_models():
    with pytest.raises(ValueError):
        run_cv(_small_ds(), ["kriging"])
    with pytest.raises(ValueError):
        CVConfig(K=0)
