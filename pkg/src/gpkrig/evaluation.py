"""Scoring rules, borehole-preserving cross-validation and the subset-GP baseline."""

from __future__ import annotations

import csv
import json
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr

from .censoring import ENGINES, mixture_moments, multiple_impute
from .core import Kernel
from .data import Dataset
from .gp_exact import FactorizationError, GPFit, cholesky, fit_mle, predict
from .lagp import LAGPConfig, lagp_predict_batch, remediated_result, slagp_predict_batch
from .locality import estimate_global_lengthscales
from .variography import empirical_semivariogram, fit_nls, ok_predict
from .vecchia import fit_svecchia, vecchia_predict

log = logging.getLogger(__name__)

SUBSET = "subset"
GP = "gp"
LAGP = "lagp"
SLAGP = "slagp"
SVECCHIA = "svecchia"
OK = "ok"
MODELS = (SUBSET, GP, LAGP, SLAGP, SVECCHIA, OK)


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named purpose, derived from one seed."""
    key = (zlib.crc32(name.encode()),) + tuple(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def rmse(y_true: ArrayLike, mu: ArrayLike) -> float:
    y = np.asarray(y_true, dtype=float).ravel()
    m = np.asarray(mu, dtype=float).ravel()
    if len(y) != len(m):
        raise ValueError(f"length mismatch: {len(y)} vs {len(m)}")
    if len(y) == 0:
        raise ValueError("need at least one value")
    return float(np.sqrt(np.mean((y - m) ** 2)))


def score_full(y: ArrayLike, mu: ArrayLike, Sigma: ArrayLike) -> float:
    """``-log|Sigma| - r' Sigma^{-1} r`` with ``r = y - mu``; higher is better."""
    r = np.asarray(y, dtype=float).ravel() - np.asarray(mu, dtype=float).ravel()
    S = np.asarray(Sigma, dtype=float)
    if S.shape != (len(r), len(r)):
        raise ValueError("Sigma has the wrong shape")
    try:
        c = cholesky(S)
    except FactorizationError as e:
        raise ValueError("Sigma is not positive definite") from e
    L = c[0]
    z = solve_triangular(L, r, lower=True, check_finite=False)
    return float(-2.0 * np.sum(np.log(np.diag(L))) - z @ z)


def score_pointwise(y: ArrayLike, mu: ArrayLike, var: ArrayLike) -> float:
    """``-sum log var_i - sum r_i^2 / var_i``."""
    r = np.asarray(y, dtype=float).ravel() - np.asarray(mu, dtype=float).ravel()
    v = np.asarray(var, dtype=float).ravel()
    if len(v) != len(r):
        raise ValueError("length mismatch")
    if np.any(v <= 0):
        raise ValueError("variances must be positive")
    return float(-np.sum(np.log(v)) - np.sum(r * r / v))


def log_loss_censored(thresholds: ArrayLike, mu: ArrayLike, var: ArrayLike,
                      direction: str = "upper") -> float:
    """Mean negative log probability of falling on the censored side of the threshold.

    Uses the log normal CDF directly, so far-tail sites give large finite
    losses instead of ``inf``.
    """
    t = np.asarray(thresholds, dtype=float).ravel()
    m = np.asarray(mu, dtype=float).ravel()
    v = np.asarray(var, dtype=float).ravel()
    if not len(t) == len(m) == len(v):
        raise ValueError("length mismatch")
    if len(t) == 0:
        raise ValueError("need at least one censored site")
    if np.any(v <= 0):
        raise ValueError("variances must be positive")
    z = (t - m) / np.sqrt(v)
    if direction == "lower":
        z = -z
    elif direction != "upper":
        raise ValueError("direction must be 'upper' or 'lower'")
    return float(-np.mean(log_ndtr(z)))


@dataclass(frozen=True)
class FoldAssignment:
    """Fold index per hole and per record.

    ``record_fold == -1`` marks records that are never held out (used by
    explicit train/test splits).
    """

    K: int
    holes: NDArray
    hole_fold: NDArray
    record_fold: NDArray

    def test_mask(self, k: int) -> NDArray:
        return self.record_fold == k

    def fold_sizes(self) -> NDArray:
        return np.bincount(self.record_fold[self.record_fold >= 0], minlength=self.K)


def borehole_folds(hole_ids: ArrayLike, K: int = 10,
                   rng: np.random.Generator | None = None) -> FoldAssignment:
    """Shuffle holes, then give each to the fold with the fewest records so far."""
    ids = np.asarray(hole_ids).astype(str)
    holes, inv, counts = np.unique(ids, return_inverse=True, return_counts=True)
    if K < 1:
        raise ValueError("K must be >= 1")
    if len(holes) < K:
        raise ValueError(f"need at least K={K} holes, got {len(holes)}")
    rng = rng if rng is not None else np.random.default_rng()
    load = np.zeros(K, dtype=np.int64)
    hf = np.empty(len(holes), dtype=np.int64)
    for h in rng.permutation(len(holes)):
        k = int(np.argmin(load))
        hf[h] = k
        load[k] += counts[h]
    return FoldAssignment(K, holes, hf, hf[inv])


def holdout_assignment(test_mask: ArrayLike, hole_ids: ArrayLike | None = None) -> FoldAssignment:
    """Single fold from an explicit test mask (for example a random 90:10 split)."""
    t = np.asarray(test_mask, dtype=bool).ravel()
    ids = np.arange(len(t)).astype(str) if hole_ids is None else np.asarray(hole_ids).astype(str)
    holes, inv = np.unique(ids, return_inverse=True)
    hf = np.full(len(holes), -1, dtype=np.int64)
    hf[inv[t]] = 0
    if np.any(hf[inv[~t]] == 0):
        raise ValueError("a hole appears in both train and test")
    return FoldAssignment(1, holes, hf, np.where(t, 0, -1))


def subset_gp(X: ArrayLike, Y: ArrayLike, m: int, rng: np.random.Generator | None = None,
              restarts: int = 0) -> GPFit:
    """Exact GP MLE on a uniform random subset of ``m`` records."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).ravel()
    n = len(Y)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    rng = rng if rng is not None else np.random.default_rng()
    idx = np.arange(n) if m == n else np.sort(rng.choice(n, m, replace=False))
    return fit_mle(X[idx], Y[idx], restarts=restarts)


@dataclass
class MetricsRecord:
    model: str
    fold: int
    n_train: int
    n_test: int
    rmse: float
    score_p: float | None
    score_f: float | None = None
    log_loss: float | None = None
    n_censored_test: int = 0
    n_errors: int = 0
    fit_seconds: float = 0.0
    predict_seconds: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("fit_seconds")
            d.pop("predict_seconds")
        return d


@dataclass(frozen=True)
class CVConfig:
    """Settings shared by every model in a cross-validation run."""

    K: int = 10
    subset_m: int = 2000
    gp_restarts: int = 0
    lagp: LAGPConfig = LAGPConfig()
    global_blocks: int = 10
    vecchia_m: int = 25
    vecchia_rounds: int = 3
    vecchia_kernel: Kernel | None = None
    ok_neighbors: int = 50
    ok_bin_width: float = 0.02
    ok_h_max: float = 0.3
    ok_max_points: int = 3000
    remediate: bool = False
    impute: bool = False
    M: int = 5
    score_full_max: int = 2000
    fold_threads: int = 1

    def __post_init__(self):
        if self.K < 1 or self.subset_m < 1 or self.vecchia_m < 1 or self.M < 1:
            raise ValueError("counts in CVConfig must be positive")
        if self.fold_threads < 1:
            raise ValueError("fold_threads must be >= 1")


@dataclass
class CVResult:
    records: list
    folds: FoldAssignment
    seed: int
    config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {}
        for m in dict.fromkeys(r.model for r in self.records):
            rs = [r for r in self.records if r.model == m]
            s = {"folds": len(rs), "n_errors": int(sum(r.n_errors for r in rs))}
            for key in ("rmse", "score_p", "score_f", "log_loss", "fit_seconds", "predict_seconds"):
                v = [getattr(r, key) for r in rs if getattr(r, key) is not None]
                v = [x for x in v if np.isfinite(x)]
                if v:
                    s[f"median_{key}"] = float(np.median(v))
                    s[f"mean_{key}"] = float(np.mean(v))
            out[m] = s
        return out

    def to_dict(self, timing: bool = False) -> dict:
        summ = self.summary()
        if not timing:
            for s in summ.values():
                for k in [k for k in s if k.endswith("_seconds")]:
                    s.pop(k)
        return {"seed": self.seed, "K": self.folds.K, "config": self.config,
                "folds": [r.to_dict(timing) for r in self.records], "summary": summ}

    def to_json(self, path, timing: bool = False) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(timing), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path, timing: bool = False) -> None:
        rows = [r.to_dict(timing) for r in self.records]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(rows[0]))
            for r in rows:
                w.writerow(["" if v is None else format(v, ".17g") if isinstance(v, float) else v
                            for v in r.values()])


def _fit_predict(model, Xtr, Ytr, Xte, cfg, rng, want_cov):
    """Returns (mean, var, cov or None, error mask, fit seconds, predict seconds)."""
    t0 = time.perf_counter()
    cov = None
    err = np.zeros(len(Xte), dtype=bool)
    if model in (SUBSET, GP):
        fit = (subset_gp(Xtr, Ytr, min(cfg.subset_m, len(Ytr)), rng, cfg.gp_restarts)
               if model == SUBSET else fit_mle(Xtr, Ytr, restarts=cfg.gp_restarts))
        t1 = time.perf_counter()
        p = predict(fit, Xte, full_cov=want_cov)
        cov = p.cov
    elif model == LAGP:
        t1 = t0
        p = lagp_predict_batch(Xtr, Ytr, Xte, cfg.lagp)
        if cfg.remediate:
            p = remediated_result(p, Xtr, Ytr)
        err = p.errors != 0
        p = p.pred
    elif model == SLAGP:
        theta, _ = estimate_global_lengthscales(Xtr, Ytr, cfg.global_blocks, rng=rng,
                                                kernel=cfg.lagp.kernel)
        t1 = time.perf_counter()
        p = slagp_predict_batch(Xtr, Ytr, Xte, cfg.lagp, theta_global=theta)
        if cfg.remediate:
            p = remediated_result(p, Xtr, Ytr)
        err = p.errors != 0
        p = p.pred
    elif model == SVECCHIA:
        fit = fit_svecchia(Xtr, Ytr, m=cfg.vecchia_m, max_rounds=cfg.vecchia_rounds,
                           kernel=cfg.vecchia_kernel, rng=rng)
        t1 = time.perf_counter()
        p = vecchia_predict(fit, Xte, full_cov=want_cov, joint=want_cov)
        cov = p.cov
    elif model == OK:
        ev = empirical_semivariogram(Xtr, Ytr, cfg.ok_bin_width, cfg.ok_h_max,
                                     max_points=cfg.ok_max_points, rng=rng)
        vm = fit_nls(ev)
        t1 = time.perf_counter()
        r = ok_predict(vm, Xtr, Ytr, Xte, n_neighbors=cfg.ok_neighbors)
        err = r.error != 0
        p = r.pred
    else:
        raise ValueError(f"unknown model {model!r}")
    t2 = time.perf_counter()
    return p.mean, p.var, cov, err, t1 - t0, t2 - t1


def _impute_fit_predict(model, Xo, Yo, Xc, thr, Xte, cfg, rng, direction):
    if model not in ENGINES:
        raise ValueError(f"model {model!r} has no imputation engine")
    t0 = time.perf_counter()
    run = multiple_impute(Xo, Yo, Xc, thr, Xte, M=cfg.M, engine=model, rng=rng,
                          lagp_config=cfg.lagp, vecchia_m=cfg.vecchia_m,
                          gp_restarts=cfg.gp_restarts, direction=direction)
    mu, var = mixture_moments(run)
    return mu, var, None, ~np.isfinite(mu), time.perf_counter() - t0, 0.0


def _evaluate_fold(ds, folds, k, model, cfg, seed):
    test = folds.test_mask(k)
    train = ~test
    cens = ds.censor.censored
    rng = substream(seed, model, k)
    obs_tr = train & ~cens
    Xte = ds.X[test]
    te_cens = cens[test]
    want_cov = model in (SUBSET, GP, SVECCHIA) and (~te_cens).sum() <= cfg.score_full_max \
        and not (cfg.impute and np.any(cens[train]))
    if cfg.impute and np.any(cens[train]):
        mu, var, cov, err, tf, tp = _impute_fit_predict(
            model, ds.X[obs_tr], ds.Y[obs_tr], ds.X[train & cens],
            ds.censor.threshold[train & cens], Xte, cfg, rng, ds.censor.direction)
    else:
        if want_cov and np.any(te_cens):
            # joint covariance only over the uncensored test records
            want_cov = False
        mu, var, cov, err, tf, tp = _fit_predict(model, ds.X[obs_tr], ds.Y[obs_tr], Xte, cfg,
                                                 rng, want_cov)
    err = err | ~np.isfinite(mu)
    yte = ds.Y[test]
    ok = ~err & ~te_cens
    r = rmse(yte[ok], mu[ok]) if ok.any() else float("nan")
    sp = None
    if model != OK and ok.any():
        sp = score_pointwise(yte[ok], mu[ok], np.maximum(var[ok], 1e-300))
    sf = None
    if cov is not None and ok.all():
        try:
            sf = score_full(yte, mu, cov)
        except ValueError:
            log.warning("fold %d: predictive covariance not positive definite", k)
    ll = None
    cm = te_cens & ~err
    if cm.any() and model != OK:
        ll = log_loss_censored(ds.censor.threshold[test][cm], mu[cm], var[cm],
                               ds.censor.direction)
    return MetricsRecord(model, k, int(train.sum()), int(test.sum()), r, sp, sf, ll,
                         int(te_cens.sum()), int(err.sum()), tf, tp)


def run_cv(ds: Dataset, models, cfg: CVConfig = CVConfig(), seed: int = 0,
           folds: FoldAssignment | None = None) -> CVResult:
    """K-fold cross-validation that holds out whole boreholes.

    Every model sees the same folds (drawn from ``seed``).  Censored
    training records are dropped unless ``cfg.impute``, in which case they
    are multiply imputed.  RMSE and scores use the uncensored held-out
    records; the log-loss uses the censored ones.  Sites with error codes
    are left out of RMSE and counted in ``n_errors``.
    """
    models = [models] if isinstance(models, str) else list(models)
    for m in models:
        if m not in MODELS:
            raise ValueError(f"unknown model {m!r}; choose from {MODELS}")
    if folds is None:
        folds = borehole_folds(ds.hole_id, cfg.K, substream(seed, "folds"))
    jobs = [(m, k) for m in models for k in range(folds.K)]

    def work(job):
        m, k = job
        rec = _evaluate_fold(ds, folds, k, m, cfg, seed)
        log.info("%s fold %d: rmse=%.5g", m, k, rec.rmse)
        return rec

    if cfg.fold_threads == 1:
        recs = [work(j) for j in jobs]
    else:
        with ThreadPoolExecutor(cfg.fold_threads) as ex:
            recs = list(ex.map(work, jobs))
    info = {"K": folds.K, "subset_m": cfg.subset_m, "lagp_m": cfg.lagp.m,
            "vecchia_m": cfg.vecchia_m, "impute": cfg.impute, "M": cfg.M}
    return CVResult(recs, folds, seed, info)
