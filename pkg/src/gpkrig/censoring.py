"""Truncated-normal draws, imputation of left-censored responses and mixture pooling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree
from scipy.special import log_ndtr, ndtri_exp

from .core import _as_2d
from .data import CensorSpec, Dataset
from .gp_exact import PredictiveDistribution, condition, fit_mle, predict
from .lagp import (OK_SITE, LAGPConfig, _local_fit, _phi0, lagp_predict_batch,
                   slagp_predict_batch)
from .locality import NN, estimate_global_lengthscales, maximin_order, prescale_inputs
from .vecchia import VecchiaFit, fit_svecchia, vecchia_predict, vecchia_sample, with_training

log = logging.getLogger(__name__)

GP = "gp"
LAGP = "lagp"
SLAGP = "slagp"
SVECCHIA = "svecchia"
ENGINES = (GP, LAGP, SLAGP, SVECCHIA)

__all__ = ["CensorSpec", "sample_truncated_normal", "impute_lagp", "impute_gp", "impute_vecchia",
           "multiple_impute", "mixture_moments", "collapse_flat_boreholes", "ImputationRun",
           "ImputeResult"]


def sample_truncated_normal(mu: ArrayLike, sigma2: ArrayLike, bound: ArrayLike,
                            rng: np.random.Generator, direction: str = "upper") -> NDArray:
    """Draws from ``N(mu, sigma2)`` restricted to ``x <= bound`` (or ``>=`` for ``"lower"``).

    Inverse-CDF sampling carried out in log space, so bounds far in the
    tail are handled without rejection loops.
    """
    mu = np.asarray(mu, dtype=float)
    s2 = np.asarray(sigma2, dtype=float)
    if np.any(s2 <= 0):
        raise ValueError("sigma2 must be positive")
    sd = np.sqrt(s2)
    bound = np.asarray(bound, dtype=float)
    sign = 1.0 if direction == "upper" else -1.0
    if direction not in ("upper", "lower"):
        raise ValueError("direction must be 'upper' or 'lower'")
    a = sign * (bound - mu) / sd
    shape = np.broadcast(mu, s2, bound).shape
    logu = np.log(rng.uniform(size=shape))
    z = ndtri_exp(np.minimum(logu + log_ndtr(a), 0.0))
    z = np.minimum(z, a)
    x = mu + sign * sd * z
    return x if x.ndim else float(x)


@dataclass
class ImputeResult:
    values: NDArray
    fallback: NDArray  # sites imputed by the fallback path
    epochs: list = field(default_factory=list)  # remaining-site counts (Vecchia)


class _ActiveIndex:
    """k-d tree over all points where only "active" ones can be returned."""

    def __init__(self, X: NDArray, active: NDArray):
        self.X = X
        self.tree = cKDTree(X)
        self.active = active.copy()
        self.n = int(self.active.sum())

    def activate(self, i: int) -> None:
        if not self.active[i]:
            self.active[i] = True
            self.n += 1

    def query(self, x, m):
        N = self.X.shape[0]
        m = min(m, self.n)
        k = min(N, 2 * m + 8)
        while True:
            d, i = self.tree.query(x, k=k)
            d, i = np.atleast_1d(d), np.atleast_1d(i)
            ok = self.active[i]
            if ok.sum() >= m or k == N:
                d, i = d[ok], i[ok]
                o = np.lexsort((i, d))[:m]
                return d[o], i[o]
            k = min(N, 2 * k)


def _site_order(X: NDArray, order: str) -> NDArray:
    if order == "maximin":
        return maximin_order(X)
    if order == "given":
        return np.arange(X.shape[0])
    raise ValueError(f"unknown site order {order!r}")


def impute_lagp(X_obs: ArrayLike, Y_obs: ArrayLike, X_cens: ArrayLike, thresholds: ArrayLike,
                config: LAGPConfig = LAGPConfig(), rng: np.random.Generator | None = None,
                theta_global: ArrayLike | None = None, order: str = "maximin",
                direction: str = "upper") -> ImputeResult:
    """Sequential (S)LAGP imputation.

    Visits censored sites in maximin order.  Each site gets a local
    prediction from the observed data plus the sites imputed so far, then
    one truncated-normal draw below its threshold.  With ``theta_global``
    the inputs are pre-scaled first (SLAGP).  Sites whose local fit fails
    are imputed at the threshold.
    """
    Xo, Xc = _as_2d(X_obs), _as_2d(X_cens)
    Yo = np.asarray(Y_obs, dtype=float).ravel()
    thr = np.asarray(thresholds, dtype=float).ravel()
    nc = Xc.shape[0]
    if Xo.shape[0] == 0:
        raise ValueError("no observed data to condition on")
    if nc == 0:
        return ImputeResult(np.empty(0), np.zeros(0, bool))
    rng = rng if rng is not None else np.random.default_rng()
    if theta_global is not None:
        Xo, Xc = prescale_inputs(Xo, theta_global), prescale_inputs(Xc, theta_global)
        config = replace(config, local_isotropic=True,
                         theta0=config.theta0 if config.theta0 is not None else 1.0)
    no = Xo.shape[0]
    Xall = np.vstack([Xo, Xc])
    Yall = np.concatenate([Yo, np.full(nc, np.nan)])
    index = _ActiveIndex(Xall, np.arange(no + nc) < no)
    phi0 = _phi0(Xo, config)
    vals = np.empty(nc)
    fb = np.zeros(nc, dtype=bool)
    for j in _site_order(Xc, order):
        m = min(config.m, index.n)
        cfg = config if m == config.m else replace(config, m=m)
        if cfg.method != NN and m <= cfg.n0:
            cfg = replace(cfg, method=NN)
        fit = _local_fit(Xall, Yall, Xc[j], cfg, phi0, index)
        if fit.error != OK_SITE or not np.isfinite(fit.var) or fit.var <= 0:
            log.warning("local fit failed at censored site %d; imputing at the threshold", j)
            vals[j] = thr[j]
            fb[j] = True
        else:
            vals[j] = sample_truncated_normal(fit.mean, fit.var, thr[j], rng, direction)
        Yall[no + j] = vals[j]
        index.activate(no + j)
    return ImputeResult(vals, fb)


def impute_gp(X_obs: ArrayLike, Y_obs: ArrayLike, X_cens: ArrayLike, thresholds: ArrayLike,
              phi, rng: np.random.Generator | None = None, order: str = "maximin",
              direction: str = "upper", y_mean: float | None = None) -> ImputeResult:
    """Sequential imputation with an exact GP and fixed hyperparameters ``phi``."""
    Xo, Xc = _as_2d(X_obs), _as_2d(X_cens)
    Yo = np.asarray(Y_obs, dtype=float).ravel()
    thr = np.asarray(thresholds, dtype=float).ravel()
    rng = rng if rng is not None else np.random.default_rng()
    ym = float(np.mean(Yo)) if y_mean is None else y_mean
    vals = np.empty(Xc.shape[0])
    Xa, Ya = Xo, Yo
    for j in _site_order(Xc, order) if Xc.shape[0] else []:
        p = predict(condition(Xa, Ya, phi, y_mean=ym), Xc[j:j + 1])
        vals[j] = sample_truncated_normal(p.mean[0], p.var[0], thr[j], rng, direction)
        Xa = np.vstack([Xa, Xc[j:j + 1]])
        Ya = np.append(Ya, vals[j])
    return ImputeResult(vals, np.zeros(Xc.shape[0], bool))


def impute_vecchia(X_obs: ArrayLike, Y_obs: ArrayLike, X_cens: ArrayLike, thresholds: ArrayLike,
                   fit: VecchiaFit, rng: np.random.Generator | None = None,
                   epoch_cap: int = 100, direction: str = "upper") -> ImputeResult:
    """Epoch-wise rejection imputation with joint Vecchia draws.

    Each epoch draws all remaining censored sites jointly from the
    predictive given the observed data and the values accepted so far, and
    keeps the coordinates that fall below their thresholds.  Sites still
    open after ``epoch_cap`` epochs get single-site truncated draws.
    """
    Xo, Xc = _as_2d(X_obs), _as_2d(X_cens)
    Yo = np.asarray(Y_obs, dtype=float).ravel()
    thr = np.asarray(thresholds, dtype=float).ravel()
    nc = Xc.shape[0]
    rng = rng if rng is not None else np.random.default_rng()
    vals = np.full(nc, np.nan)
    fb = np.zeros(nc, dtype=bool)
    rem = np.arange(nc)
    acc = np.zeros(nc, dtype=bool)
    counts = []
    sign = 1.0 if direction == "upper" else -1.0
    for _ in range(epoch_cap):
        if len(rem) == 0:
            break
        counts.append(len(rem))
        cond = with_training(fit, np.vstack([Xo, Xc[acc]]), np.concatenate([Yo, vals[acc]]))
        draw = vecchia_sample(cond, Xc[rem], rng)[0]
        ok = sign * (draw - thr[rem]) < 0
        vals[rem[ok]] = draw[ok]
        acc[rem[ok]] = True
        rem = rem[~ok]
    if len(rem):
        log.warning("%d censored sites still open after %d epochs; truncated draws used",
                    len(rem), epoch_cap)
        cond = with_training(fit, np.vstack([Xo, Xc[acc]]), np.concatenate([Yo, vals[acc]]))
        p = vecchia_predict(cond, Xc[rem], joint=False)
        vals[rem] = sample_truncated_normal(p.mean, p.var, thr[rem], rng, direction)
        fb[rem] = True
    counts.append(len(rem))
    return ImputeResult(vals, fb, counts)


@dataclass
class ImputationRun:
    """``M`` completed data sets and the predictive distribution under each."""

    engine: str
    imputed: list
    preds: list
    fallback: list

    @property
    def M(self) -> int:
        return len(self.preds)


def mixture_moments(run: ImputationRun | list, at: ArrayLike | None = None):
    """Mean and variance of the equal-weight Gaussian mixture over imputations."""
    preds = run.preds if isinstance(run, ImputationRun) else run
    if len(preds) < 1:
        raise ValueError("need at least one component")
    mu = np.vstack([p.mean for p in preds])
    s2 = np.vstack([p.var for p in preds])
    if at is not None:
        mu, s2 = mu[:, at], s2[:, at]
    # average variance plus the between-imputation spread of the means
    return mu.mean(axis=0), s2.mean(axis=0) + mu.var(axis=0)


def multiple_impute(X_obs: ArrayLike, Y_obs: ArrayLike, X_cens: ArrayLike, thresholds: ArrayLike,
                    Xstar: ArrayLike, M: int = 5, engine: str = SLAGP,
                    rng: np.random.Generator | None = None,
                    lagp_config: LAGPConfig = LAGPConfig(), vecchia_m: int = 25,
                    vecchia_fit: VecchiaFit | None = None, gp_restarts: int = 2,
                    direction: str = "upper") -> ImputationRun:
    """Impute ``M`` times and predict at ``Xstar`` from each completed data set.

    Global quantities (SLAGP pre-scaling lengthscales, SVecchia and exact
    GP hyperparameters) are estimated once from the observed data and held
    fixed across imputations, except that the exact-GP engine refits its
    MLE on every completed data set.  Each imputation uses its own child
    random stream.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}")
    Xo, Xc, Xs = _as_2d(X_obs), _as_2d(X_cens), _as_2d(Xstar)
    Yo = np.asarray(Y_obs, dtype=float).ravel()
    thr = np.asarray(thresholds, dtype=float).ravel()
    rng = rng if rng is not None else np.random.default_rng()
    streams = rng.spawn(M)
    theta_g = None
    gfit = None
    if engine == SLAGP:
        theta_g, _ = estimate_global_lengthscales(Xo, Yo, rng=np.random.default_rng(lagp_config.seed),
                                                  kernel=lagp_config.kernel)
    elif engine == SVECCHIA and vecchia_fit is None:
        vecchia_fit = fit_svecchia(Xo, Yo, m=vecchia_m)
    elif engine == GP:
        gfit = fit_mle(Xo, Yo, restarts=gp_restarts)
    imputed, preds, fbs = [], [], []
    for r in streams:
        if engine in (LAGP, SLAGP):
            res = impute_lagp(Xo, Yo, Xc, thr, lagp_config, r, theta_g, direction=direction)
        elif engine == SVECCHIA:
            res = impute_vecchia(Xo, Yo, Xc, thr, vecchia_fit, r, direction=direction)
        else:
            res = impute_gp(Xo, Yo, Xc, thr, gfit.phi_hat, r, direction=direction, y_mean=gfit.y_mean)
        Xa = np.vstack([Xo, Xc])
        Ya = np.concatenate([Yo, res.values])
        if engine == SLAGP:
            pred = slagp_predict_batch(Xa, Ya, Xs, lagp_config, theta_global=theta_g).pred
        elif engine == LAGP:
            pred = lagp_predict_batch(Xa, Ya, Xs, lagp_config).pred
        elif engine == SVECCHIA:
            pred = vecchia_predict(with_training(vecchia_fit, Xa, Ya), Xs, joint=False)
        else:
            pred = predict(fit_mle(Xa, Ya, restarts=gp_restarts), Xs)
        imputed.append(res.values)
        preds.append(pred)
        fbs.append(res.fallback)
    return ImputationRun(engine, imputed, preds, fbs)


def collapse_flat_boreholes(ds: Dataset, depth_col: int = -1) -> Dataset:
    """Reduce holes whose recorded values are all equal to three records.

    Keeps the two extreme records along ``depth_col`` and the record
    nearest the midpoint between them.  Holes with three or fewer records
    or any variation in value are left alone; row order is preserved.
    """
    keep = np.ones(ds.n, dtype=bool)
    order = np.argsort(ds.hole_id.astype(str), kind="stable")
    ids = ds.hole_id.astype(str)[order]
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    ends = np.r_[starts[1:], len(ids)]
    for s, e in zip(starts, ends):
        rows = order[s:e]
        if len(rows) <= 3 or not np.all(ds.Y[rows] == ds.Y[rows[0]]):
            continue
        z = ds.X[rows, depth_col]
        top, bot = rows[np.argmax(z)], rows[np.argmin(z)]
        mid = 0.5 * (ds.X[top] + ds.X[bot])
        dist = np.sum((ds.X[rows] - mid) ** 2, axis=1)
        dist[(rows == top) | (rows == bot)] = np.inf
        middle = rows[np.argmin(dist)]
        keep[rows] = False
        keep[[top, bot, middle]] = True
    return ds.subset(np.flatnonzero(keep))
