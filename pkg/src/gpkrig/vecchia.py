"""Vecchia-approximated GP with nearest-neighbor conditioning sets and scaled refitting.

Points are ordered (maximin by default) and each one conditions on its
``m`` nearest predecessors.  The resulting product of univariate
conditionals defines a sparse upper-triangular ``U`` with
``Sigma^{-1} ~ U U^T``; column ``i`` holds ``1/sigma_i`` on the diagonal
and ``-b/sigma_i`` at the conditioning rows, where ``b`` solves the
conditioning-block system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize, sparse
from scipy.sparse.linalg import spsolve_triangular
from scipy.spatial import cKDTree

from . import _accel
from .core import Hyperparams, Kernel, _as_2d, kernel_blocks
from .gp_exact import DEFAULT_BOUNDS, LOG2PI, TAU2_MIN, DegenerateError, FactorizationError, PredictiveDistribution, default_init
from .locality import maximin_order, prescale_inputs

log = logging.getLogger(__name__)

MAXIMIN = "maximin"
RANDOM = "random"
GIVEN = "given"

CHUNK = 4096

# "numba" runs the compiled per-point loop; "numpy" the batched reference
BACKEND = "numba"


@dataclass(frozen=True)
class ConditioningSets:
    """Ordering plus, for each ordered position, the positions it conditions on.

    ``nbrs[i, :counts[i]]`` are ordered positions (all ``< i``) sorted by
    distance; the remainder of the row is ``-1``.
    """

    order: NDArray
    nbrs: NDArray
    counts: NDArray

    @property
    def n(self) -> int:
        return len(self.order)

    @property
    def m(self) -> int:
        return self.nbrs.shape[1]

    def c(self, i: int) -> NDArray:
        return self.nbrs[i, :self.counts[i]]


def _predecessor_nn(Xo: NDArray, m: int, start: int = 0, allowed: int | None = None) -> NDArray:
    """m nearest predecessors for ordered positions ``start..n-1``.

    Predecessors of position ``i`` are positions ``< min(i, allowed)``.
    Returns an ``(n - start, m)`` array padded with -1.
    """
    n = Xo.shape[0]
    out = np.full((n - start, m), -1, dtype=np.int64)
    if m == 0 or n == start:
        return out
    if allowed is not None:
        # every site sees the same fixed set of positions
        cnt = min(allowed, m)
        tree = cKDTree(Xo[:allowed])
        for s in range(start, n, CHUNK):
            e = min(s + CHUNK, n)
            _, idx = tree.query(Xo[s:e], k=cnt)
            out[s - start:e - start, :cnt] = idx.reshape(e - s, cnt)
        return out
    s = start
    while s < n:
        if s <= m:
            # small prefix: every predecessor, sorted by distance
            e = min(m + 1, n)
            for i in range(s, e):
                if i == 0:
                    continue
                d = np.sum((Xo[:i] - Xo[i]) ** 2, axis=1)
                o = np.lexsort((np.arange(i), d))
                out[i - start, :i] = o
            s = e
            continue
        e = min(2 * s, n)
        tree = cKDTree(Xo[:e])
        pos = np.arange(s, e)
        k = min(2 * m + 1, e)
        todo = np.arange(len(pos))
        while len(todo):
            d, idx = tree.query(Xo[pos[todo]], k=k)
            d, idx = d.reshape(len(todo), k), idx.reshape(len(todo), k)
            valid = idx < pos[todo][:, None]
            enough = (valid.sum(axis=1) >= m) | (k >= e)
            rows = todo[enough]
            if len(rows):
                v, dd, ii = valid[enough], d[enough], idx[enough]
                key = np.where(v, dd, np.inf)
                o = np.lexsort((ii, key), axis=1)[:, :m]
                sel = np.take_along_axis(ii, o, axis=1)
                ok = np.take_along_axis(v, o, axis=1)
                out[pos[rows] - start] = np.where(ok, sel, -1)
            todo = todo[~enough]
            k = min(2 * k, e)
        s = e
    return out


def build_conditioning_sets(X: ArrayLike, m: int, ordering: str = MAXIMIN,
                            order: ArrayLike | None = None,
                            rng: np.random.Generator | None = None) -> ConditioningSets:
    """Order the points and find each one's ``min(i, m)`` nearest predecessors.

    Distances are Euclidean in the coordinates given, so pass pre-scaled
    inputs for a scaled (anisotropic) metric.
    """
    X = _as_2d(X)
    n = X.shape[0]
    if m < 1:
        raise ValueError("m must be >= 1")
    if ordering == MAXIMIN:
        order = maximin_order(X)
    elif ordering == RANDOM:
        rng = rng if rng is not None else np.random.default_rng(0)
        order = rng.permutation(n)
    elif ordering == GIVEN:
        order = np.asarray(order, dtype=np.int64)
        if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
            raise ValueError("order must be a permutation of 0..n-1")
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    m_eff = min(m, max(n - 1, 1))
    nbrs = _predecessor_nn(X[order], m_eff)
    counts = (nbrs >= 0).sum(axis=1)
    return ConditioningSets(np.asarray(order, dtype=np.int64), nbrs, counts)


def _block_terms(kernel: Kernel, Xo: NDArray, nugget: NDArray, yo: NDArray | None,
                 nbrs: NDArray, pos: NDArray, grad: bool = False):
    """Conditional quantities for the points at ordered positions ``pos``.

    Works in correlation units (``K + g I``).  Returns ``s2`` (conditional
    variance), ``b`` (regression weights on the conditioning set), the
    residual ``r = y_i - b^T y_c`` when ``yo`` is given, and optionally the
    derivative ingredients for the profile likelihood.
    """
    nb = nbrs[pos]
    mask = nb >= 0
    safe = np.where(mask, nb, 0)
    B, m = nb.shape
    idx = np.concatenate([safe, pos[:, None]], axis=1)
    P = Xo[idx]
    if grad:
        K, dK = kernel_blocks(kernel, P, grad=True)
    else:
        K = kernel_blocks(kernel, P)
    full = np.concatenate([mask, np.ones((B, 1), dtype=bool)], axis=1)
    outer = full[:, :, None] & full[:, None, :]
    K = np.where(outer, K, 0.0)
    diag = np.where(full, nugget[idx], 0.0) + np.where(full, 0.0, 1.0)
    K[:, np.arange(m + 1), np.arange(m + 1)] += diag
    Kcc = K[:, :m, :m]
    kc = K[:, :m, m]
    rhs = kc[:, :, None] if yo is None else np.stack([kc, np.where(mask, yo[safe], 0.0)], axis=2)
    try:
        sol = np.linalg.solve(Kcc, rhs)
    except np.linalg.LinAlgError:
        raise FactorizationError("singular conditioning block") from None
    b = sol[:, :, 0]
    s2 = K[:, m, m] - np.einsum("bi,bi->b", kc, b)
    if not np.all(s2 > 0) or not np.all(np.isfinite(s2)):
        raise FactorizationError("nonpositive conditional variance")
    if yo is None:
        return s2, b, None, None
    beta = sol[:, :, 1]
    r = yo[pos] - np.einsum("bi,bi->b", b, yo[safe] * mask)
    if not grad:
        return s2, b, r, None
    # d/dparam of  Q_i = r^2/s2  and  LD_i = log s2  via u = [-b, 1], beta~ = [beta, 0]
    u = np.concatenate([-b, np.ones((B, 1))], axis=1)
    bt = np.concatenate([beta, np.zeros((B, 1))], axis=1)
    dQ, dLD = [], []
    for dA in [None] + list(dK):
        if dA is None:
            # nugget: dA is the identity on real (training) entries
            w = np.where(full, (nugget[idx] > 0) * 1.0, 0.0)
            uAu = np.einsum("bi,bi,bi->b", u, w, u)
            uAb = np.einsum("bi,bi,bi->b", u, w, bt)
        else:
            dA = np.where(outer, dA, 0.0)
            Au = np.einsum("bij,bj->bi", dA, u)
            uAu = np.einsum("bi,bi->b", u, Au)
            uAb = np.einsum("bi,bi->b", bt, Au)
        dQ.append(-(2.0 * r / s2 * uAb + (r * r) / (s2 * s2) * uAu))
        dLD.append(uAu / s2)
    return s2, b, r, (np.array(dQ), np.array(dLD))


def _block_terms_compiled(kernel, Xo, nugget, yo, nbrs, pos, grad=False):
    """Compiled twin of ``_block_terms`` with the same return layout."""
    B, m = len(pos), nbrs.shape[1]
    q = 1 + kernel.n_lengthscales
    s2 = np.empty(B)
    b = np.zeros((B, m))
    r = np.empty(B)
    dq = np.zeros((B, q))
    dld = np.zeros((B, q))
    y = yo if yo is not None else np.zeros(len(Xo))
    fam, p, nu, sep, theta = _accel.kernel_args(kernel)
    status = _accel.vecchia_terms(np.ascontiguousarray(Xo), nugget, y, nbrs, pos, fam, p, nu, sep,
                                  theta, yo is not None, grad, s2, b, r, dq, dld)
    if status:
        raise FactorizationError("singular conditioning block or nonpositive conditional variance")
    if yo is None:
        return s2, b, None, None
    return s2, b, r, ((dq.T, dld.T) if grad else None)


def _terms(*args, **kw):
    f = _block_terms_compiled if BACKEND == "numba" else _block_terms
    return f(*args, **kw)


def _iter_chunks(n, chunk=CHUNK):
    for s in range(0, n, chunk):
        yield np.arange(s, min(s + chunk, n))


def _profile_terms(g, kernel, Xo, yo, cs, grad):
    n = len(yo)
    nug = np.full(n, g)
    Q = LD = 0.0
    q = 1 + kernel.n_lengthscales
    dQ = np.zeros(q)
    dLD = np.zeros(q)
    for pos in _iter_chunks(n):
        s2, _, r, d = _terms(kernel, Xo, nug, yo, cs.nbrs, pos, grad)
        Q += float(np.sum(r * r / s2))
        LD += float(np.sum(np.log(s2)))
        if grad:
            dQ += d[0].sum(axis=1)
            dLD += d[1].sum(axis=1)
    return Q, LD, dQ, dLD


def vecchia_loglik(phi: Hyperparams, X: ArrayLike, Y: ArrayLike, cs: ConditioningSets) -> float:
    """Sum of log conditional densities ``log p(y_i | y_c(i))`` under ``tau2 (K + g I)``."""
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    if cs.n != len(Y) or X.shape[0] != len(Y):
        raise ValueError("conditioning sets, X and Y disagree in size")
    Q, LD, _, _ = _profile_terms(phi.g, phi.kernel, X[cs.order], Y[cs.order], cs, False)
    n = len(Y)
    return -0.5 * n * (LOG2PI + np.log(phi.tau2)) - 0.5 * LD - 0.5 * Q / phi.tau2


def vecchia_profile(g: float, kernel: Kernel, X: ArrayLike, Y: ArrayLike, cs: ConditioningSets,
                    grad: bool = False):
    """Vecchia log likelihood with ``tau2`` concentrated out, and its gradient in (g, theta)."""
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    n = len(Y)
    Q, LD, dQ, dLD = _profile_terms(g, kernel, X[cs.order], Y[cs.order], cs, grad)
    if Q / n < TAU2_MIN:
        raise DegenerateError("concentrated tau2 is degenerate")
    ll = -0.5 * n * (LOG2PI + np.log(Q / n) + 1.0) - 0.5 * LD
    if not grad:
        return ll
    return ll, -0.5 * n * dQ / Q - 0.5 * dLD


@dataclass
class SparseUFactor:
    """Columns of ``U`` in ordered positions.

    ``rows[i, :counts[i]]`` hold the off-diagonal row positions of column
    ``i`` with values ``vals``; ``diag[i] = 1/sigma_i``.
    """

    rows: NDArray
    vals: NDArray
    diag: NDArray
    counts: NDArray

    @property
    def n(self) -> int:
        return len(self.diag)

    @property
    def sigma2(self) -> NDArray:
        return 1.0 / self.diag ** 2

    @property
    def nnz(self) -> int:
        return int(self.n + self.counts.sum())

    def to_csc(self) -> sparse.csc_matrix:
        n = self.n
        mask = self.rows >= 0
        cols = np.repeat(np.arange(n), mask.sum(axis=1))
        r = np.concatenate([self.rows[mask], np.arange(n)])
        c = np.concatenate([cols, np.arange(n)])
        v = np.concatenate([self.vals[mask], self.diag])
        return sparse.csc_matrix((v, (r, c)), shape=(n, n))

    def to_coo_text(self, path) -> None:
        """Write ``row col value`` triplets (0-based ordered positions), 17 significant digits."""
        U = self.to_csc().tocoo()
        o = np.lexsort((U.row, U.col))
        with open(path, "w") as fh:
            fh.write(f"# n={self.n} nnz={U.nnz}\n")
            for r, c, v in zip(U.row[o], U.col[o], U.data[o]):
                fh.write(f"{r} {c} {v:.17g}\n")


def _factor(phi: Hyperparams, Xo: NDArray, nugget: NDArray, nbrs: NDArray, positions: NDArray):
    m = nbrs.shape[1]
    n = len(positions)
    rows = np.full((n, m), -1, dtype=np.int64)
    vals = np.zeros((n, m))
    diag = np.empty(n)
    for s in range(0, n, CHUNK):
        pos = positions[s:s + CHUNK]
        s2, b, _, _ = _terms(phi.kernel, Xo, nugget, None, nbrs, pos)
        sig = np.sqrt(phi.tau2 * s2)
        mask = nbrs[pos] >= 0
        rows[s:s + CHUNK] = nbrs[pos]
        vals[s:s + CHUNK] = np.where(mask, -b / sig[:, None], 0.0)
        diag[s:s + CHUNK] = 1.0 / sig
    return SparseUFactor(rows, vals, diag, (rows >= 0).sum(axis=1))


def u_factor(phi: Hyperparams, X: ArrayLike, cs: ConditioningSets) -> SparseUFactor:
    """All columns of ``U`` (in ordered positions) for ``Sigma = tau2 (K + g I)``."""
    X = _as_2d(X)
    return _factor(phi, X[cs.order], np.full(cs.n, phi.g), cs.nbrs, np.arange(cs.n))


def u_column(phi: Hyperparams, X: ArrayLike, cs: ConditioningSets, i: int):
    """Column ``i`` (ordered position) of ``U``.

    Returns
    -------
    rows : int array
        Conditioning positions, then ``i`` itself.
    values : array
        ``-b/sigma_i`` at the conditioning rows and ``1/sigma_i`` at ``i``.
    sigma2 : float
        Conditional variance of point ``i`` given its conditioning set.
    """
    X = _as_2d(X)
    if not 0 <= i < cs.n:
        raise IndexError(i)
    f = _factor(phi, X[cs.order], np.full(cs.n, phi.g), cs.nbrs, np.array([i]))
    k = f.counts[0]
    rows = np.append(f.rows[0, :k], i)
    vals = np.append(f.vals[0, :k], f.diag[0])
    return rows, vals, float(f.sigma2[0])


@dataclass
class VecchiaFit:
    phi_hat: Hyperparams
    cs: ConditioningSets
    X: NDArray
    Y: NDArray  # centered responses
    y_mean: float
    m: int
    loglik: float
    rounds: int = 1
    theta_path: list = field(default_factory=list)
    converged: bool = True

    @property
    def scaled_X(self) -> NDArray:
        return prescale_inputs(self.X, self.phi_hat.kernel.theta)

    def factor(self) -> SparseUFactor:
        return u_factor(self.phi_hat, self.X, self.cs)


def _optimize(X, Yc, cs, kernel0, g0, g_bounds, theta_bounds, maxiter, gtol):
    q = kernel0.n_lengthscales
    lo = np.log(np.concatenate([[g_bounds[0]], np.broadcast_to(theta_bounds[0], (q,))]))
    hi = np.log(np.concatenate([[g_bounds[1]], np.broadcast_to(theta_bounds[1], (q,))]))
    z0 = np.clip(np.log(np.concatenate([[g0], kernel0.theta])), lo, hi)
    Xo, yo = X[cs.order], Yc[cs.order]
    n = len(yo)
    best = {"f": np.inf, "z": z0}

    def fun(z):
        p = np.exp(z)
        k = kernel0.with_lengthscales(p[1:])
        try:
            Q, LD, dQ, dLD = _profile_terms(p[0], k, Xo, yo, cs, True)
        except FactorizationError:
            return 1e300, np.zeros_like(z)
        ll = -0.5 * n * (LOG2PI + np.log(Q / n) + 1.0) - 0.5 * LD
        gr = -0.5 * n * dQ / Q - 0.5 * dLD
        if -ll < best["f"]:
            best["f"], best["z"] = -ll, z.copy()
        return -ll, -gr * p

    f0, _ = fun(z0)
    if f0 >= 1e300:
        raise FactorizationError("Vecchia likelihood fails at the initial point")
    res = optimize.minimize(fun, z0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                            options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-12})
    z = res.x if res.fun <= best["f"] else best["z"]
    if not res.success:
        log.warning("Vecchia MLE did not converge: %s", res.message)
    p = np.exp(z)
    return float(p[0]), kernel0.with_lengthscales(p[1:]), -min(res.fun, best["f"]), bool(res.success)


def fit_svecchia(X: ArrayLike, Y: ArrayLike, m: int = 25, max_rounds: int = 3,
                 init: Hyperparams | None = None, ordering: str = MAXIMIN,
                 kernel: Kernel | None = None, tol: float = 0.05,
                 g_bounds=DEFAULT_BOUNDS, theta_bounds=DEFAULT_BOUNDS,
                 maxiter: int = 200, gtol: float = 1e-5, center: bool = True,
                 rng: np.random.Generator | None = None) -> VecchiaFit:
    """Scaled Vecchia: alternate likelihood maximization and re-scaled conditioning sets.

    Each round orders and finds neighbors in inputs divided by the square
    root of the current lengthscales, then maximizes the Vecchia profile
    likelihood over (g, theta) with L-BFGS-B on analytic gradients.  Stops
    once every lengthscale moves by less than ``tol`` (relative) or after
    ``max_rounds``.  The default kernel is an ARD Matérn 5/2 applied to
    the scaled distance.
    """
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    n, d = X.shape
    if n < m + 1:
        raise ValueError(f"need n >= m + 1 = {m + 1} points, got {n}")
    if init is None:
        base = kernel if kernel is not None else Kernel.matern(np.ones(d), nu=2.5, separable=False)
        init = default_init(X, kernel=base)
    y_mean = float(np.mean(Y)) if center else 0.0
    Yc = Y - y_mean
    if float(Yc @ Yc) / n < TAU2_MIN:
        raise DegenerateError("responses are constant")
    rng = rng if rng is not None else np.random.default_rng(0)
    kern, g = init.kernel, init.g
    path = [kern.theta.copy()]
    conv = True
    for rnd in range(1, max_rounds + 1):
        th = np.broadcast_to(kern.theta, (d,))
        cs = build_conditioning_sets(prescale_inputs(X, th), m, ordering, rng=rng)
        g, kern, ll, conv = _optimize(X, Yc, cs, kern, g, g_bounds, theta_bounds, maxiter, gtol)
        path.append(kern.theta.copy())
        change = np.max(np.abs(path[-1] - path[-2]) / path[-2])
        log.info("svecchia round %d: theta=%s g=%.4g ll=%.6g", rnd, kern.theta, g, ll)
        if change < tol:
            break
    Q, LD, _, _ = _profile_terms(g, kern, X[cs.order], Yc[cs.order], cs, False)
    phi = Hyperparams(Q / n, g, kern)
    return VecchiaFit(phi, cs, X, Yc, y_mean, m, ll, rnd, path, conv)


def with_training(fit: VecchiaFit, X: ArrayLike, Y: ArrayLike) -> VecchiaFit:
    """Same hyperparameters and centering, different conditioning data.

    Only prediction uses the result, so training conditioning sets are not
    built; the training order is the row order.
    """
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    n = len(Y)
    cs = ConditioningSets(np.arange(n), np.full((n, 0), -1, dtype=np.int64), np.zeros(n, dtype=np.int64))
    return replace(fit, cs=cs, X=X, Y=Y - fit.y_mean, loglik=float("nan"), theta_path=[])


@dataclass
class _Joint:
    mean: NDArray  # in site order
    f: SparseUFactor
    order: NDArray  # site order -> prediction position
    n: int
    upp: sparse.csr_matrix | None


def _joint_factor(fit: VecchiaFit, Xs: NDArray, joint: bool, latent: bool, m: int) -> _Joint:
    phi = fit.phi_hat
    th = np.broadcast_to(phi.kernel.theta, (fit.X.shape[1],))
    n, ns = fit.X.shape[0], Xs.shape[0]
    Xt = fit.X[fit.cs.order]
    sp_order = maximin_order(prescale_inputs(Xs, th)) if joint else np.arange(ns)
    Xall = np.vstack([Xt, Xs[sp_order]])
    Sall = prescale_inputs(Xall, th)
    width = min(m, n + ns - 1) if joint else min(m, n)
    nbrs = np.full((n + ns, width), -1, dtype=np.int64)
    nbrs[n:] = _predecessor_nn(Sall, width, start=n, allowed=None if joint else n)
    nug = np.concatenate([np.full(n, phi.g), np.full(ns, 0.0 if latent else phi.g)])
    f = _factor(phi, Xall, nug, nbrs, np.arange(n, n + ns))
    yo = fit.Y[fit.cs.order]
    # mean by forward substitution in order: mu_j = b^T (values on c(j))
    b = -f.vals / f.diag[:, None]
    vals = np.concatenate([yo, np.zeros(ns)])
    rows = f.rows
    if joint:
        for j in range(ns):
            r = rows[j]
            r = r[r >= 0]
            vals[n + j] = b[j, :len(r)] @ vals[r]
    else:
        safe = np.where(rows >= 0, rows, 0)
        vals[n:] = np.sum(np.where(rows >= 0, b * vals[safe], 0.0), axis=1)
    inv = np.empty(ns, dtype=np.int64)
    inv[sp_order] = np.arange(ns)
    upp = None
    if joint:
        local = np.where(rows >= n, rows - n, -1)
        mask = local >= 0
        cols = np.repeat(np.arange(ns), mask.sum(axis=1))
        upp = sparse.csr_matrix((np.concatenate([f.vals[mask], f.diag]),
                                 (np.concatenate([local[mask], np.arange(ns)]),
                                  np.concatenate([cols, np.arange(ns)]))), shape=(ns, ns))
    return _Joint(vals[n:][inv] + fit.y_mean, f, inv, n, upp)


def vecchia_predict(fit: VecchiaFit, Xstar: ArrayLike, full_cov: bool = False,
                    joint: bool = True, latent: bool = False,
                    m: int | None = None) -> PredictiveDistribution:
    """Predict at ``Xstar`` by appending the sites after the training points.

    Sites are ordered maximin among themselves.  With ``joint`` a site may
    condition on earlier sites as well as training points, giving a joint
    predictive distribution; otherwise each site conditions only on
    training points and the sites are independent given the data.
    Variances include the noise ``tau2 g`` unless ``latent``.
    """
    Xs = _check_sites(fit, Xstar)
    J = _joint_factor(fit, Xs, joint, latent, fit.m if m is None else m)
    ns = Xs.shape[0]
    inv = J.order
    if not joint:
        var = J.f.sigma2[inv]
        return PredictiveDistribution(J.mean, var, np.diag(var) if full_cov else None)
    # covariance of the block is U_pp^-T U_pp^-1
    if full_cov:
        Uinv = spsolve_triangular(J.upp, np.eye(ns), lower=False)
        C = Uinv.T @ Uinv
        C = 0.5 * (C + C.T)
        C = C[np.ix_(inv, inv)]
        return PredictiveDistribution(J.mean, np.diag(C).copy(), C)
    var = np.empty(ns)
    Ucsc = J.upp.tocsc()
    for j in range(ns):
        e = np.zeros(j + 1)
        e[j] = 1.0
        x = spsolve_triangular(Ucsc[:j + 1, :j + 1].tocsr(), e, lower=False)
        var[j] = x @ x
    return PredictiveDistribution(J.mean, var[inv])


def _check_sites(fit, Xstar):
    Xs = _as_2d(Xstar)
    if Xs.shape[1] != fit.X.shape[1]:
        raise ValueError("Xstar has the wrong number of columns")
    if Xs.shape[0] == 0:
        raise ValueError("Xstar is empty")
    return Xs


def vecchia_sample(fit: VecchiaFit, Xstar: ArrayLike, rng: np.random.Generator,
                   size: int = 1, latent: bool = False, m: int | None = None) -> NDArray:
    """Joint draws from the Vecchia predictive at ``Xstar``, shape ``(size, n')``.

    Uses ``mean + U_pp^{-T} z`` with standard normal ``z``.
    """
    Xs = _check_sites(fit, Xstar)
    J = _joint_factor(fit, Xs, True, latent, fit.m if m is None else m)
    ns = Xs.shape[0]
    z = rng.standard_normal((ns, size))
    L = J.upp.T.tocsr()
    x = spsolve_triangular(L, z, lower=True)
    return (x[J.order].T + J.mean).reshape(size, ns)
