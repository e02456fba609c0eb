"""Local approximate GP prediction (LAGP), its pre-scaled variant (SLAGP) and nugget remediation."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.distance import pdist

from .core import Hyperparams, Kernel, _as_2d
from .gp_exact import (DEFAULT_BOUNDS, DegenerateError, FactorizationError,
                       PredictiveDistribution, concentrated_tau2, condition, fit_mle, predict)
from .locality import (ALC, NN, Neighborhood, SpatialIndex, alc_select,
                       estimate_global_lengthscales, nn_search, prescale_inputs)

log = logging.getLogger(__name__)

OK_SITE = 0
ERR_FACTORIZATION = 1
ERR_DEGENERATE = 2


@dataclass(frozen=True)
class LAGPConfig:
    """Settings for local fits.

    ``theta0`` and ``g0`` are the starting values of every local MLE and the
    hyperparameters used by ALC.  ``theta0=None`` means the 10% quantile of
    squared pairwise distances in a subsample of the training inputs.
    ``fallback=True`` predicts the neighborhood mean and variance at sites
    whose local fit fails instead of leaving NaN.
    """

    m: int = 50
    method: str = ALC
    n0: int = 6
    cand_limit: int = 1000
    local_isotropic: bool = True
    kernel: Kernel = Kernel.gaussian()
    theta0: float | None = None
    g0: float = 0.1
    g_lower: float = 1e-6
    g_upper: float = DEFAULT_BOUNDS[1]
    theta_bounds: tuple = DEFAULT_BOUNDS
    maxiter: int = 500
    threads: int = 1
    fallback: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.method not in (NN, ALC):
            raise ValueError(f"unknown neighborhood method {self.method!r}")
        if self.m < 2:
            raise ValueError("local neighborhoods need m >= 2")
        if self.method == ALC and not 0 < self.n0 < self.m:
            raise ValueError("ALC needs 0 < n0 < m")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass(frozen=True)
class LocalFit:
    site: NDArray
    neighborhood: Neighborhood
    phi_hat: Hyperparams | None
    mean: float
    var: float
    nugget_at_bound: bool = False
    error: int = OK_SITE
    y_mean: float = 0.0


@dataclass
class LAGPResult:
    fits: list
    pred: PredictiveDistribution

    @property
    def errors(self) -> NDArray:
        return np.array([f.error for f in self.fits], dtype=int)

    @property
    def n_errors(self) -> int:
        return int(np.count_nonzero(self.errors))

    def to_csv(self, path, coords: ArrayLike | None = None) -> None:
        """Site coordinates, mean, var, nugget, at-bound flag and error code."""
        sites = _as_2d(coords) if coords is not None else np.vstack([f.site for f in self.fits])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{j + 1}" for j in range(sites.shape[1])]
                       + ["mean", "var", "nugget", "at_bound", "error_code"])
            for s, f in zip(sites, self.fits):
                g = f.phi_hat.g if f.phi_hat is not None else float("nan")
                w.writerow([_fmt(v) for v in s]
                           + [_fmt(f.mean), _fmt(f.var), _fmt(g), int(f.nugget_at_bound), f.error])


def _fmt(v) -> str:
    return format(float(v), ".17g")


def default_theta0(X: NDArray, seed: int = 0, n_sample: int = 1000) -> float:
    """10% quantile of squared pairwise distances in a random subsample."""
    X = _as_2d(X)
    n = X.shape[0]
    if n > n_sample:
        X = X[np.random.default_rng(seed).choice(n, n_sample, replace=False)]
    d2 = pdist(X, "sqeuclidean")
    d2 = d2[d2 > 0]
    return float(np.quantile(d2, 0.1)) if d2.size else 1.0


def _local_kernel(cfg: LAGPConfig, theta0: float, d: int) -> Kernel:
    q = 1 if cfg.local_isotropic else d
    return cfg.kernel.with_lengthscales(np.full(q, theta0))


def _neighborhood(X, x, cfg, phi0, index):
    if cfg.m >= index.n or cfg.method == NN:
        return nn_search(index, x, min(cfg.m, index.n))
    return alc_select(X, x, cfg.m, phi0, n0=cfg.n0, cand_limit=cfg.cand_limit, index=index)


def _failed(x, nb, Yn, cfg, code):
    if cfg.fallback:
        mean, var = float(np.mean(Yn)), max(float(np.var(Yn)), 1e-12)
    else:
        mean = var = float("nan")
    return LocalFit(x, nb, None, mean, var, False, code)


def _local_fit(X, Y, x, cfg, phi0, index):
    x = np.asarray(x, dtype=float).ravel()
    nb = _neighborhood(X, x, cfg, phi0, index)
    Xn, Yn = X[nb.indices], Y[nb.indices]
    fit = None
    for g0 in (phi0.g, 1.0):
        try:
            fit = fit_mle(Xn, Yn, replace(phi0, g=max(g0, cfg.g_lower)),
                          g_bounds=(cfg.g_lower, cfg.g_upper),
                          theta_bounds=cfg.theta_bounds, maxiter=cfg.maxiter)
            break
        except FactorizationError:
            continue  # retry with a larger starting nugget
        except DegenerateError:
            return _failed(x, nb, Yn, cfg, ERR_DEGENERATE)
    if fit is None:
        return _failed(x, nb, Yn, cfg, ERR_FACTORIZATION)
    p = predict(fit, x[None, :])
    at_bound = fit.phi_hat.g - cfg.g_lower <= 1e-6
    return LocalFit(x, nb, fit.phi_hat, float(p.mean[0]), float(p.var[0]), bool(at_bound),
                    OK_SITE, fit.y_mean)


def _phi0(X, cfg):
    theta0 = cfg.theta0 if cfg.theta0 is not None else default_theta0(X, cfg.seed)
    return Hyperparams(1.0, cfg.g0, _local_kernel(cfg, theta0, X.shape[1]))


def lagp_predict_one(X: ArrayLike, Y: ArrayLike, x: ArrayLike, config: LAGPConfig = LAGPConfig(),
                     index: SpatialIndex | None = None) -> LocalFit:
    """Neighborhood selection, local MLE and local prediction at one site."""
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    if X.shape[0] < config.m:
        raise ValueError(f"need at least m={config.m} training points, got {X.shape[0]}")
    index = index if index is not None else SpatialIndex(X)
    return _local_fit(X, Y, x, config, _phi0(X, config), index)


def _collect(fits) -> PredictiveDistribution:
    mean = np.array([f.mean for f in fits])
    var = np.array([f.var for f in fits])
    return PredictiveDistribution(mean, var)


def lagp_predict_batch(X: ArrayLike, Y: ArrayLike, Xstar: ArrayLike,
                       config: LAGPConfig = LAGPConfig()) -> LAGPResult:
    """Independent local predictions at every row of ``Xstar``.

    Output order matches ``Xstar``; results do not depend on ``threads``.
    """
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    Xs = _as_2d(Xstar)
    if Xs.shape[1] != X.shape[1]:
        raise ValueError("Xstar and X have different numbers of columns")
    if X.shape[0] < config.m:
        raise ValueError(f"need at least m={config.m} training points, got {X.shape[0]}")
    index = SpatialIndex(X)
    phi0 = _phi0(X, config)

    def work(x):
        return _local_fit(X, Y, x, config, phi0, index)

    if config.threads == 1 or len(Xs) < 2:
        fits = [work(x) for x in Xs]
    else:
        with ThreadPoolExecutor(config.threads) as ex:
            fits = list(ex.map(work, Xs, chunksize=16))
    return LAGPResult(fits, _collect(fits))


@dataclass
class SLAGPResult(LAGPResult):
    theta_global: NDArray = None
    g_global: float = 0.0


def slagp_predict_batch(X: ArrayLike, Y: ArrayLike, Xstar: ArrayLike,
                        config: LAGPConfig = LAGPConfig(), n_blocks: int = 10,
                        block_size: int | None = None, theta_global: ArrayLike | None = None,
                        rng: np.random.Generator | None = None) -> SLAGPResult:
    """LAGP on inputs divided by the square root of global ARD lengthscales.

    Local kernels are isotropic in the scaled space and start from
    ``theta = 1``, the lengthscale implied by the scaling.  Pass
    ``theta_global`` to skip the global estimate.
    """
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    Xs = _as_2d(Xstar)
    g_glob = float("nan")
    if theta_global is None:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        theta_global, g_glob = estimate_global_lengthscales(X, Y, n_blocks, block_size, rng,
                                                            kernel=config.kernel)
    theta_global = np.broadcast_to(np.asarray(theta_global, float), (X.shape[1],)).copy()
    cfg = replace(config, local_isotropic=True,
                  theta0=config.theta0 if config.theta0 is not None else 1.0)
    res = lagp_predict_batch(prescale_inputs(X, theta_global), Y,
                             prescale_inputs(Xs, theta_global), cfg)
    # report sites in the original coordinates
    fits = [replace(f, site=x) for f, x in zip(res.fits, Xs)]
    return SLAGPResult(fits, res.pred, theta_global, g_glob)


def remediate_nuggets(fits: list, X: ArrayLike, Y: ArrayLike) -> list:
    """Replace bound-pinned local nuggets by the median of the others and re-predict.

    ``X`` and ``Y`` must be the training data (in the same, possibly
    pre-scaled, coordinates) the fits were computed on.  Lengthscales and
    neighborhoods are kept; the scale is re-concentrated under the new
    nugget.
    """
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    free = [f.phi_hat.g for f in fits if f.error == OK_SITE and not f.nugget_at_bound]
    pinned = any(f.error == OK_SITE and f.nugget_at_bound for f in fits)
    if not pinned:
        return list(fits)
    if not free:
        raise ValueError("every local nugget is at its bound; nothing to take the median of")
    g_med = float(np.median(free))
    out = []
    for f in fits:
        if f.error != OK_SITE or not f.nugget_at_bound:
            out.append(f)
            continue
        Xn, Yn = X[f.neighborhood.indices], Y[f.neighborhood.indices]
        k = f.phi_hat.kernel
        yc = Yn - f.y_mean
        tau2 = concentrated_tau2(g_med, k, Xn, yc)
        gp = condition(Xn, Yn, Hyperparams(tau2, g_med, k), y_mean=f.y_mean)
        p = predict(gp, f.neighborhood.center[None, :])
        out.append(replace(f, phi_hat=gp.phi_hat, mean=float(p.mean[0]), var=float(p.var[0]),
                           nugget_at_bound=False))
    return out


def remediated_result(res: LAGPResult, X: ArrayLike, Y: ArrayLike) -> LAGPResult:
    """``remediate_nuggets`` on a batch result, given the unscaled training data."""
    if isinstance(res, SLAGPResult):
        X = prescale_inputs(X, res.theta_global)
    fits = remediate_nuggets(res.fits, X, Y)
    return replace(res, fits=fits, pred=_collect(fits))
