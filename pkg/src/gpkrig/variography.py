"""Empirical and model semivariograms, NLS fitting and ordinary kriging."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize
from scipy.linalg import cho_solve
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .core import MATERN, POWEREXP, Hyperparams, Kernel, _as_2d, _matern_from_u, kernel_matrix
from .gp_exact import FactorizationError, PredictiveDistribution, cholesky, condition, predict

log = logging.getLogger(__name__)

OK_SITE = 0
ERR_EMPTY_NEIGHBORHOOD = 1
ERR_SINGULAR = 2


@dataclass(frozen=True)
class EmpiricalVariogram:
    bin_edges: NDArray
    bin_centers: NDArray
    gamma_hat: NDArray  # NaN where the bin is empty
    pair_counts: NDArray

    @property
    def empty(self) -> NDArray:
        return self.pair_counts == 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_center", "gamma_hat", "pair_count"])
            for c, gm, n in zip(self.bin_centers, self.gamma_hat, self.pair_counts):
                w.writerow([f"{c:.17g}", "" if n == 0 else f"{gm:.17g}", int(n)])


@dataclass(frozen=True)
class VariogramModel:
    family: str
    nugget_k: float
    partial_sill: float
    range: float
    p: float = 2.0
    nu: float = 2.5

    def __post_init__(self):
        if self.nugget_k < 0 or self.partial_sill <= 0 or self.range <= 0:
            raise ValueError("need nugget >= 0, partial sill > 0, range > 0")

    @property
    def sill(self) -> float:
        return self.nugget_k + self.partial_sill

    def to_dict(self) -> dict:
        return {"family": self.family, "nugget_k": self.nugget_k,
                "partial_sill": self.partial_sill, "range": self.range,
                "p": self.p, "nu": self.nu}

    @classmethod
    def from_dict(cls, d) -> "VariogramModel":
        return cls(d["family"], d["nugget_k"], d["partial_sill"], d["range"],
                   d.get("p", 2.0), d.get("nu", 2.5))


def empirical_semivariogram(X: ArrayLike, Y: ArrayLike, bin_width: float, h_max: float,
                            max_points: int | None = None,
                            rng: np.random.Generator | None = None) -> EmpiricalVariogram:
    """Binned estimate ``sum (y_i - y_j)^2 / (2 |N(h)|)``, unordered pairs counted once.

    Bins are ``[0, h_1], (h_1, h_2], ...``.  With ``max_points`` the estimate
    uses a uniform random subsample of the data.
    """
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    if len(Y) < 2:
        raise ValueError("need at least two points for a semivariogram")
    if not bin_width > 0 or not h_max > bin_width:
        raise ValueError("need bin_width > 0 and h_max > bin_width")
    if max_points is not None and len(Y) > max_points:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(len(Y), max_points, replace=False))
        X, Y = X[idx], Y[idx]
    nb = int(np.ceil(h_max / bin_width - 1e-9))
    edges = np.arange(nb + 1) * bin_width
    edges[-1] = h_max
    if len(Y) <= 5000:
        h = pdist(X)
        dy2 = pdist(Y[:, None], "sqeuclidean")
        keep = h <= h_max
        h, dy2 = h[keep], dy2[keep]
    else:
        pairs = cKDTree(X).query_pairs(h_max, output_type="ndarray")
        h = np.linalg.norm(X[pairs[:, 0]] - X[pairs[:, 1]], axis=1)
        dy2 = (Y[pairs[:, 0]] - Y[pairs[:, 1]]) ** 2
    # right-closed bins; distance 0 falls into the first bin
    b = np.searchsorted(edges, h, side="left") - 1
    b[b < 0] = 0
    counts = np.bincount(b, minlength=nb)[:nb]
    sums = np.bincount(b, weights=dy2, minlength=nb)[:nb]
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(counts > 0, sums / (2.0 * counts), np.nan)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return EmpiricalVariogram(edges, centers, gamma, counts)


def _correlation(m: VariogramModel, h: NDArray) -> NDArray:
    if m.family == POWEREXP:
        return np.exp(-((h / m.range) ** m.p))
    return _matern_from_u(h * np.sqrt(2.0 * m.nu) / m.range, m.nu)


def model_semivariogram(m: VariogramModel, h: ArrayLike):
    """``gamma(0) = 0``; nugget + partial_sill * (1 - correlation(h)) for h > 0."""
    h = np.asarray(h, dtype=float)
    out = np.where(h > 0, m.nugget_k + m.partial_sill * (1.0 - _correlation(m, h)), 0.0)
    return float(out) if out.ndim == 0 else out


def fit_nls(ev: EmpiricalVariogram, family: str = POWEREXP, weights: str = "equal",
            bounds: dict | None = None, p: float = 2.0, nu: float = 2.5,
            h_max: float | None = None, bins: ArrayLike | None = None) -> VariogramModel:
    """Weighted least-squares fit of (nugget, partial sill, range).

    ``h_max`` or an explicit boolean/int ``bins`` selection restrict the
    fit to a subset of bins; this is how eyeball-style fits are expressed.
    Default nugget lower bound is 1e-4.
    """
    use = ~ev.empty
    if h_max is not None:
        use &= ev.bin_centers <= h_max
    if bins is not None:
        sel = np.zeros_like(use)
        sel[np.asarray(bins)] = True
        use &= sel
    if use.sum() < 3:
        raise ValueError("need at least 3 non-empty bins to fit a variogram")
    h = ev.bin_centers[use]
    gam = ev.gamma_hat[use]
    if weights == "equal":
        w = np.ones_like(h)
    elif weights == "pair_count":
        w = ev.pair_counts[use].astype(float)
        w = w / w.mean()
    else:
        raise ValueError(f"unknown weighting {weights!r}")
    gmax = float(np.max(gam))
    hspan = float(np.max(h))
    b = {"nugget": (1e-4, max(gmax, 2e-4)), "sill": (1e-8, 10.0 * gmax),
         "range": (1e-3 * hspan, 10.0 * hspan)}
    if bounds:
        b.update(bounds)
    lo = np.array([b["nugget"][0], b["sill"][0], b["range"][0]])
    hi = np.array([b["nugget"][1], b["sill"][1], b["range"][1]])
    sw = np.sqrt(w)

    def resid(z):
        m = VariogramModel(family, z[0], z[1], z[2], p, nu)
        return sw * (model_semivariogram(m, h) - gam)

    best = None
    for fr in (0.1, 0.3, 0.6):
        for s in (0.5, 1.0):
            x0 = np.clip([s * 0.1 * gmax + lo[0], s * gmax, fr * hspan], lo, hi)
            try:
                r = optimize.least_squares(resid, x0, bounds=(lo, hi), method="trf",
                                           x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12)
            except ValueError:
                continue
            if best is None or r.cost < best.cost:
                best = r
    if best is None:
        raise RuntimeError("variogram fit failed")
    if not best.success:
        warnings.warn(f"variogram NLS did not converge: {best.message}")
    z = best.x
    return VariogramModel(family, float(z[0]), float(z[1]), float(z[2]), p, nu)


def vgram_to_kernel(m: VariogramModel) -> Hyperparams:
    """theta = R^2 (R^p for a power-exponential), tau2 = sigma^2, g = nugget/sigma^2."""
    if m.partial_sill <= 0:
        raise ValueError("partial sill must be positive")
    if m.family == POWEREXP:
        k = Kernel(POWEREXP, (m.range ** m.p,), p=m.p)
    else:
        k = Kernel(MATERN, (m.range ** 2,), nu=m.nu)
    return Hyperparams(m.partial_sill, m.nugget_k / m.partial_sill, k)


def kernel_to_vgram(phi: Hyperparams) -> VariogramModel:
    k = phi.kernel
    if not k.isotropic:
        raise ValueError("variogram models are isotropic")
    t = k.theta[0]
    if k.family == POWEREXP:
        return VariogramModel(POWEREXP, phi.tau2 * phi.g, phi.tau2, t ** (1.0 / k.p), p=k.p)
    return VariogramModel(MATERN, phi.tau2 * phi.g, phi.tau2, np.sqrt(t), nu=k.nu)


@dataclass
class OKResult:
    pred: PredictiveDistribution
    error: NDArray  # per-site error code, 0 = ok
    n_neighbors: NDArray

    @property
    def mean(self):
        return self.pred.mean

    @property
    def var(self):
        return self.pred.var


def ok_predict(m: VariogramModel, X: ArrayLike, Y: ArrayLike, Xstar: ArrayLike,
               n_neighbors: int | None = 50, radius: float | None = None,
               at_data: str = "exact", min_neighbors: int = 10, full_cov: bool = False,
               center: bool = True, chunk: int = 2000) -> OKResult:
    """Kriging equations on a local neighborhood with variogram-implied covariance.

    Responses are centered once globally.  ``at_data="exact"`` reproduces the
    observation (zero variance) at a training site; ``"smoothed"`` treats the
    nugget as GP noise.  Sites whose neighborhood is too small get an error
    code and NaN predictions.
    """
    if at_data not in ("exact", "smoothed"):
        raise ValueError("at_data must be 'exact' or 'smoothed'")
    X = _as_2d(X)
    Xs = _as_2d(Xstar)
    Y = np.asarray(Y, dtype=float).ravel()
    n = len(Y)
    ybar = float(np.mean(Y)) if center else 0.0
    Yc = Y - ybar
    phi = vgram_to_kernel(m)
    k = phi.kernel
    sill = phi.tau2 * (1.0 + phi.g)
    ns = Xs.shape[0]
    mean = np.full(ns, np.nan)
    var = np.full(ns, np.nan)
    err = np.zeros(ns, dtype=int)
    nn_count = np.zeros(ns, dtype=int)

    if radius is None and (n_neighbors is None or n_neighbors >= n):
        # global neighborhood: one solve, full covariance available
        fit = condition(X, Y, phi, y_mean=ybar)
        pd = predict(fit, Xs, full_cov=full_cov)
        if at_data == "exact":
            D2 = ((Xs[:, None, :] - X[None, :, :]) ** 2).sum(-1)
            hit = np.flatnonzero((D2 == 0.0).any(axis=1))
            if len(hit):
                mu, v, C = pd.mean.copy(), pd.var.copy(), pd.cov
                if C is not None:
                    C = C.copy()
                # coincident sites: cross-covariance is the full sill (gamma(0) = 0)
                Kx = phi.tau2 * kernel_matrix(k, Xs, X)
                Kx[D2 == 0.0] = sill
                A = cho_solve(fit.chol, Kx.T / phi.tau2)  # Sigma_N^{-1} Kx^T
                mu = Kx @ fit.alpha / phi.tau2 + ybar
                if C is not None:
                    Kss = phi.tau2 * kernel_matrix(k, Xs)
                    Kss[np.diag_indices_from(Kss)] = sill
                    C = Kss - Kx @ A
                    C = 0.5 * (C + C.T)
                    v = np.maximum(np.diag(C).copy(), 0.0)
                else:
                    v = np.maximum(sill - np.sum(Kx * A.T, axis=1), 0.0)
                pd = PredictiveDistribution(mu, v, C)
        return OKResult(pd, err, np.full(ns, n))

    tree = cKDTree(X)
    if radius is not None:
        for s in range(ns):
            idx = np.array(sorted(tree.query_ball_point(Xs[s], radius)), dtype=int)
            nn_count[s] = len(idx)
            if len(idx) < min_neighbors:
                err[s] = ERR_EMPTY_NEIGHBORHOOD
                continue
            if n_neighbors is not None and len(idx) > n_neighbors:
                d = np.sum((X[idx] - Xs[s]) ** 2, axis=1)
                idx = idx[np.lexsort((idx, d))[:n_neighbors]]
            r = _krige_one(phi, sill, X[idx], Yc[idx], Xs[s], at_data)
            if r is None:
                err[s] = ERR_SINGULAR
            else:
                mean[s], var[s] = r[0] + ybar, r[1]
        return OKResult(PredictiveDistribution(mean, var), err, nn_count)

    mm = min(n_neighbors, n)
    for start in range(0, ns, chunk):
        sl = slice(start, min(ns, start + chunk))
        _, idx = tree.query(Xs[sl], k=mm)
        idx = idx.reshape(-1, mm)
        for j, s in enumerate(range(sl.start, sl.stop)):
            nn_count[s] = mm
            r = _krige_one(phi, sill, X[idx[j]], Yc[idx[j]], Xs[s], at_data)
            if r is None:
                err[s] = ERR_SINGULAR
            else:
                mean[s], var[s] = r[0] + ybar, r[1]
    return OKResult(PredictiveDistribution(mean, var), err, nn_count)


def _krige_one(phi, sill, Xn, Yn, x, at_data):
    k = phi.kernel
    C = phi.tau2 * kernel_matrix(k, Xn)
    C[np.diag_indices_from(C)] = sill
    c = phi.tau2 * kernel_matrix(k, x[None, :], Xn)[0]
    if at_data == "exact":
        c[np.all(Xn == x, axis=1)] = sill
    try:
        ch = cholesky(C)
    except FactorizationError:
        return None
    w = cho_solve(ch, c)
    return float(w @ Yn), max(sill - float(w @ c), 0.0)
