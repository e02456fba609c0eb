"""Exact dense GP: likelihood, profile likelihood and gradient, MLE, prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg, optimize

from .core import MIN_JITTER, Hyperparams, Kernel, _as_2d, kernel_grad_theta, kernel_matrix

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)
DEFAULT_BOUNDS = (1e-6, 1e4)
TAU2_MIN = 1e-12


class FactorizationError(np.linalg.LinAlgError):
    """Covariance matrix is not numerically positive definite."""


class DegenerateError(ValueError):
    """Concentrated scale estimate collapsed to (numerically) zero."""


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: NDArray
    var: NDArray
    cov: NDArray | None = None

    def __len__(self):
        return len(self.mean)


@dataclass
class GPFit:
    phi_hat: Hyperparams
    X: NDArray
    Y: NDArray  # centered responses
    y_mean: float
    chol: tuple
    loglik: float
    iters: int = 0
    converged: bool = True
    jitter: float = 0.0
    alpha: NDArray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]


def cholesky(A: NDArray, jitter: float = 0.0) -> tuple:
    """Lower Cholesky factor as a ``cho_factor`` tuple."""
    if jitter:
        A = A + jitter * np.eye(A.shape[0])
    try:
        c = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError as e:
        raise FactorizationError(str(e)) from None
    if not np.all(np.isfinite(c[0])):
        raise FactorizationError("non-finite Cholesky factor")
    return c


def _logdet(c: tuple) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(c[0]))))


def _kg(g: float, kernel: Kernel, X: NDArray) -> NDArray:
    K = kernel_matrix(kernel, X)
    K[np.diag_indices_from(K)] += g
    return K


def _factor_kg(g, kernel, X):
    """Factor K + gI, adding the minimum jitter when an interpolating fit fails."""
    Kg = _kg(g, kernel, X)
    try:
        return Kg, cholesky(Kg), 0.0
    except FactorizationError:
        if g > 0:
            raise
    log.warning("K is singular with g=0; adding jitter %g", MIN_JITTER)
    return Kg, cholesky(Kg, MIN_JITTER), MIN_JITTER


def log_likelihood(phi: Hyperparams, X: ArrayLike, Y: ArrayLike) -> float:
    """Zero-mean MVN log density of ``Y`` under ``tau2 (K + g I)``."""
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    n = len(Y)
    c = cholesky(phi.tau2 * _kg(phi.g, phi.kernel, X))
    a = linalg.cho_solve(c, Y, check_finite=False)
    return -0.5 * n * LOG2PI - 0.5 * _logdet(c) - 0.5 * float(Y @ a)


def concentrated_tau2(g: float, kernel: Kernel, X: ArrayLike, Y: ArrayLike) -> float:
    """Closed-form maximizer ``Y^T (K + g I)^{-1} Y / N`` of the likelihood in tau2."""
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    c = cholesky(_kg(g, kernel, X))
    t = float(Y @ linalg.cho_solve(c, Y, check_finite=False)) / len(Y)
    if t < TAU2_MIN:
        raise DegenerateError(f"concentrated tau2 = {t:.3g} is degenerate")
    return t


def _profile(g, kernel, X, Y, want_grad=True):
    """Profile log likelihood and its gradient in (g, theta_1..theta_q)."""
    n = len(Y)
    Kg = _kg(g, kernel, X)
    c = cholesky(Kg)
    a = linalg.cho_solve(c, Y, check_finite=False)
    psi = float(Y @ a)
    if psi / n < TAU2_MIN:
        raise DegenerateError("responses are (numerically) all zero")
    ll = -0.5 * n * (LOG2PI + np.log(psi / n) + 1.0) - 0.5 * _logdet(c)
    if not want_grad:
        return ll, None
    Ki = linalg.cho_solve(c, np.eye(n), check_finite=False)
    grad = np.empty(1 + kernel.n_lengthscales)
    # dK/dg = I
    grad[0] = 0.5 * n * float(a @ a) / psi - 0.5 * np.trace(Ki)
    K = Kg.copy()
    K[np.diag_indices_from(K)] -= g
    for j in range(kernel.n_lengthscales):
        dK = kernel_grad_theta(kernel, X, j, K=K)
        grad[1 + j] = 0.5 * n * float(a @ dK @ a) / psi - 0.5 * float(np.sum(Ki * dK))
    return ll, grad


def profile_loglik(g: float, kernel: Kernel, X: ArrayLike, Y: ArrayLike) -> float:
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    return _profile(g, kernel, X, Y, want_grad=False)[0]


def profile_gradient(g: float, kernel: Kernel, X: ArrayLike, Y: ArrayLike) -> NDArray:
    """Gradient ``(dl/dg, dl/dtheta_1, ..., dl/dtheta_q)`` with tau2 concentrated out."""
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    return _profile(g, kernel, X, Y)[1]


def default_init(X: NDArray, kernel: Kernel | None = None, isotropic: bool = False) -> Hyperparams:
    """g = 0.1 and theta_k = 0.1 * (range of column k)^2."""
    X = _as_2d(X)
    rng = np.ptp(X, axis=0)
    rng = np.where(rng > 0, rng, 1.0)
    theta = 0.1 * rng ** 2
    if isotropic:
        theta = np.array([0.1 * float(np.max(rng)) ** 2])
    base = kernel if kernel is not None else Kernel.gaussian()
    return Hyperparams(1.0, 0.1, base.with_lengthscales(theta))


def _box(b, q):
    lo, hi = b
    return np.broadcast_to(np.asarray(lo, float), (q,)), np.broadcast_to(np.asarray(hi, float), (q,))


def condition(X: ArrayLike, Y: ArrayLike, phi: Hyperparams, center: bool = True,
              y_mean: float | None = None) -> GPFit:
    """GPFit for fixed hyperparameters (no optimization)."""
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    if y_mean is None:
        y_mean = float(np.mean(Y)) if center else 0.0
    Yc = Y - y_mean
    Kg, c, jit = _factor_kg(phi.g, phi.kernel, X)
    a = linalg.cho_solve(c, Yc, check_finite=False)
    n = len(Y)
    ll = -0.5 * n * (LOG2PI + np.log(phi.tau2)) - 0.5 * _logdet(c) - 0.5 * float(Yc @ a) / phi.tau2
    return GPFit(phi, X, Yc, y_mean, c, ll, jitter=jit, alpha=a)


def _restart_shifts(restarts, q):
    ln10 = np.log(10.0)
    pattern = [(0.0, ln10), (0.0, -ln10), (-ln10, 0.0), (-ln10, ln10), (-ln10, -ln10)]
    for i in range(restarts):
        dg, dt = pattern[i % len(pattern)]
        yield np.concatenate([[dg], np.full(q, dt)])


def fit_mle(X: ArrayLike, Y: ArrayLike, init: Hyperparams | None = None,
            g_bounds=DEFAULT_BOUNDS, theta_bounds=DEFAULT_BOUNDS,
            maxiter: int = 500, gtol: float = 1e-5, center: bool = True,
            restarts: int = 0) -> GPFit:
    """Maximum likelihood fit over (log g, log theta) with tau2 concentrated out.

    ``restarts`` adds deterministic extra starting points (lengthscales
    scaled by 10 and 1/10, then smaller nuggets) and keeps the best optimum.
    Non-convergence is logged and the best iterate is returned.
    """
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    if init is None:
        init = default_init(X)
    kernel0 = init.kernel
    kernel0.check_dim(X.shape[1])
    q = kernel0.n_lengthscales
    y_mean = float(np.mean(Y)) if center else 0.0
    Yc = Y - y_mean
    if float(Yc @ Yc) / len(Yc) < TAU2_MIN:
        raise DegenerateError("responses are constant; concentrated tau2 is degenerate")

    glo, ghi = _box(g_bounds, 1)
    tlo, thi = _box(theta_bounds, q)
    lo = np.log(np.concatenate([glo, tlo]))
    hi = np.log(np.concatenate([ghi, thi]))
    x0 = np.log(np.concatenate([[init.g], kernel0.theta]))
    x0 = np.clip(x0, lo, hi)

    # factorization failure at the initial point is fatal
    _profile(float(np.exp(x0[0])), kernel0.with_lengthscales(np.exp(x0[1:])), X, Yc, False)

    best = {"f": np.inf, "x": x0}
    starts = [x0]
    for shift in _restart_shifts(restarts, q):
        starts.append(np.clip(x0 + shift, lo, hi))

    def fun(z):
        p = np.exp(z)
        try:
            ll, gr = _profile(p[0], kernel0.with_lengthscales(p[1:]), X, Yc)
        except (FactorizationError, DegenerateError):
            return 1e300, np.zeros_like(z)
        if -ll < best["f"]:
            best["f"], best["x"] = -ll, z.copy()
        return -ll, -gr * p

    res = None
    for z0 in starts:
        r = optimize.minimize(fun, z0, jac=True, method="L-BFGS-B",
                              bounds=list(zip(lo, hi)),
                              options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-13})
        if res is None or r.fun < res.fun:
            res = r
    z = res.x if res.fun <= best["f"] else best["x"]
    if not res.success:
        log.debug("MLE did not converge: %s", res.message)
    p = np.exp(z)
    kernel = kernel0.with_lengthscales(p[1:])
    g = float(p[0])
    tau2 = concentrated_tau2(g, kernel, X, Yc)
    fit = condition(X, Y, Hyperparams(tau2, g, kernel), y_mean=y_mean)
    fit.iters = int(res.nit)
    fit.converged = bool(res.success)
    return fit


def predict(fit: GPFit, Xstar: ArrayLike, full_cov: bool = False,
            latent: bool = False) -> PredictiveDistribution:
    """Posterior predictive at ``Xstar``.

    The noise variance ``tau2 * g`` is included unless ``latent``.
    """
    Xs = _as_2d(Xstar)
    if Xs.shape[1] != fit.X.shape[1]:
        raise ValueError(f"Xstar has {Xs.shape[1]} columns, training inputs have {fit.X.shape[1]}")
    phi = fit.phi_hat
    k = phi.kernel
    kx = kernel_matrix(k, Xs, fit.X)
    mean = kx @ fit.alpha + fit.y_mean
    L = fit.chol[0]
    V = linalg.solve_triangular(L, kx.T, lower=True, check_finite=False)
    noise = 0.0 if latent else phi.g
    if full_cov:
        C = kernel_matrix(k, Xs) - V.T @ V
        C[np.diag_indices_from(C)] += noise
        C *= phi.tau2
        C = 0.5 * (C + C.T)
        var = np.maximum(np.diag(C).copy(), 0.0)
        return PredictiveDistribution(mean, var, C)
    var = phi.tau2 * (1.0 + noise - np.sum(V * V, axis=0))
    return PredictiveDistribution(mean, np.maximum(var, 0.0))
