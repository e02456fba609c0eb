"""Spatial indexing, nearest neighbors, ALC neighborhoods, maximin ordering and pre-scaling."""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from . import _accel
from .core import Hyperparams, _as_2d, kernel_matrix
from .gp_exact import DegenerateError, FactorizationError, default_init, fit_mle

log = logging.getLogger(__name__)

NN = "NN"
ALC = "ALC"


class SpatialIndex:
    """k-d tree over coded points; k-NN ties are broken by lower index."""

    def __init__(self, X: ArrayLike, leafsize: int = 16):
        self.X = _as_2d(X)
        self.leafsize = leafsize
        self.tree = cKDTree(self.X, leafsize=leafsize)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def query(self, x: ArrayLike, m: int) -> tuple[NDArray, NDArray]:
        """Distances and indices of the ``m`` nearest points, sorted by (distance, index)."""
        if m > self.n:
            raise ValueError(f"asked for {m} neighbors from {self.n} points")
        x = np.asarray(x, dtype=float).ravel()
        k = min(m + 1, self.n)
        d, i = self.tree.query(x, k=k)
        d, i = np.atleast_1d(d), np.atleast_1d(i)
        if k > m and d[m] > d[m - 1]:
            d, i = d[:m], i[:m]
        elif k > m:
            # tie at the cut-off: collect everything at that radius
            r = d[m - 1] * (1.0 + 1e-12) + 1e-300
            i = np.asarray(self.tree.query_ball_point(x, r), dtype=int)
            d = np.sqrt(np.sum((self.X[i] - x) ** 2, axis=1))
        o = np.lexsort((i, d))[:m]
        return d[o], i[o]


@dataclass(frozen=True)
class Neighborhood:
    indices: NDArray
    method: str
    center: NDArray

    def __len__(self):
        return len(self.indices)


def nn_search(idx: SpatialIndex, x: ArrayLike, m: int) -> Neighborhood:
    _, i = idx.query(x, m)
    return Neighborhood(i, NN, np.asarray(x, dtype=float).ravel())


def alc_select(X: ArrayLike, x: ArrayLike, m: int, phi: Hyperparams, n0: int = 6,
               cand_limit: int = 1000, index: SpatialIndex | None = None,
               compiled: bool = True) -> Neighborhood:
    """Greedy neighborhood minimizing the posterior variance at ``x``.

    Starts from the ``n0`` nearest neighbors and then adds, one at a time,
    the candidate (among the ``cand_limit`` nearest) with the largest
    reduction in predictive variance at ``x``.  Uses only inputs and
    ``phi``; the responses never enter.  ``compiled=False`` runs the
    vectorized numpy reference of the same rank-one updates.
    """
    X = _as_2d(X)
    x = np.asarray(x, dtype=float).ravel()
    index = index if index is not None else SpatialIndex(X)
    n = index.n
    if not 0 < n0 < m <= n:
        raise ValueError("need 0 < n0 < m <= n")
    _, cand = index.query(x, min(max(cand_limit, m), n))
    nc = len(cand)
    k = phi.kernel
    g = phi.g
    P = np.vstack([X[cand], x[None, :]])  # last row is the reference site
    xr = nc
    if compiled:
        fam, p, nu, sep, theta = _accel.kernel_args(k)
        sel = _accel.alc_greedy(P, nc, n0, m, float(g), fam, p, nu, sep, theta)
        if len(sel) < m:
            log.warning("ALC: no admissible candidates left at size %d", len(sel))
        return Neighborhood(cand[sel], ALC, x)

    sel = list(range(n0))  # positions within cand
    chosen = np.zeros(nc, dtype=bool)
    chosen[:n0] = True
    Kc = np.zeros((nc + 1, m))
    G = np.zeros((nc + 1, m))
    Kc[:, :n0] = kernel_matrix(k, P, P[:n0])
    C = Kc[:n0, :n0].copy()
    C[np.diag_indices_from(C)] += g
    Ci = np.linalg.inv(C)
    G[:, :n0] = Kc[:, :n0] @ Ci
    s = np.einsum("ij,ij->i", G[:, :n0], Kc[:, :n0])  # k_c' C^-1 k_c
    t = G[:, :n0] @ Kc[xr, :n0]  # k_x' C^-1 k_c
    kxc = kernel_matrix(k, P, x[None, :])[:, 0]
    cur = n0
    while cur < m:
        denom = 1.0 + g - s[:nc]
        red = (kxc[:nc] - t[:nc]) ** 2
        ok = (~chosen) & (denom > 1e-12 * (1.0 + g))
        if not np.any(ok):
            log.warning("ALC: no admissible candidates left at size %d", cur)
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            crit = np.where(ok, red / denom, -np.inf)
        a = int(np.argmax(crit))
        u = G[a, :cur].copy()
        mu = 1.0 / denom[a]
        ka = kernel_matrix(k, P, P[a:a + 1])[:, 0]
        w = G[:, :cur] @ Kc[a, :cur] - ka
        G[:, :cur] += mu * np.outer(w, u)
        G[:, cur] = -mu * w
        Kc[:, cur] = ka
        s += mu * w * w
        t += mu * w * w[xr]
        chosen[a] = True
        sel.append(a)
        cur += 1
    return Neighborhood(cand[np.array(sel)], ALC, x)


def maximin_order(X: ArrayLike) -> NDArray:
    """Exact greedy maximin permutation.

    Starts at the point farthest from the centroid; each next point
    maximizes its minimum distance to those already ordered (ties go to
    the lower index).  Distances are updated lazily with ball queries
    whose radius shrinks as the ordering fills in.
    """
    X = _as_2d(X)
    n = X.shape[0]
    if n == 1:
        return np.zeros(1, dtype=int)
    c = X.mean(axis=0)
    dc = np.sum((X - c) ** 2, axis=1)
    first = int(np.flatnonzero(dc == dc.max())[0])
    tree = cKDTree(X)
    dmin = np.sqrt(np.sum((X - X[first]) ** 2, axis=1))
    done = np.zeros(n, dtype=bool)
    done[first] = True
    order = [first]
    heap = [(-dmin[i], i) for i in range(n) if i != first]
    heapq.heapify(heap)
    while heap:
        negd, i = heapq.heappop(heap)
        if done[i] or -negd != dmin[i]:
            continue  # stale entry
        done[i] = True
        order.append(i)
        r = dmin[i]
        if r <= 0:
            # remaining points duplicate ordered ones; their distance stays 0
            continue
        nb = tree.query_ball_point(X[i], r)
        if not nb:
            continue
        nb = np.asarray(nb, dtype=int)
        nb = nb[~done[nb]]
        d = np.sqrt(np.sum((X[nb] - X[i]) ** 2, axis=1))
        upd = d < dmin[nb]
        for j, dj in zip(nb[upd], d[upd]):
            dmin[j] = dj
            heapq.heappush(heap, (-dj, int(j)))
    return np.asarray(order, dtype=int)


def prescale_inputs(X: ArrayLike, theta: ArrayLike) -> NDArray:
    """Divide column k by sqrt(theta_k)."""
    X = _as_2d(X)
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (X.shape[1],))
    if np.any(theta <= 0):
        raise ValueError("lengthscales must be positive")
    return X / np.sqrt(theta)


def estimate_global_lengthscales(X: ArrayLike, Y: ArrayLike, n_blocks: int = 10,
                                 block_size: int | None = None,
                                 rng: np.random.Generator | None = None,
                                 kernel=None) -> tuple[NDArray, float]:
    """ARD MLEs on random disjoint subsets.

    Returns the per-coordinate geometric mean of the lengthscales and the
    median nugget over blocks whose fit succeeded.
    """
    X = _as_2d(X)
    Y = np.asarray(Y, dtype=float).ravel()
    n, d = X.shape
    if block_size is None:
        block_size = int(min(1000, max(n // 10, 1)))
    if block_size > n:
        raise ValueError("block_size exceeds the number of points")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_blocks = min(n_blocks, n // block_size)
    perm = np.arange(n) if n_blocks * block_size == n and n_blocks == 1 else rng.permutation(n)
    thetas, gs = [], []
    for b in range(n_blocks):
        idx = perm[b * block_size:(b + 1) * block_size]
        init = default_init(X[idx], kernel=kernel)
        try:
            fit = fit_mle(X[idx], Y[idx], init)
        except (FactorizationError, DegenerateError) as e:
            log.warning("global lengthscale block %d failed: %s", b, e)
            continue
        thetas.append(fit.phi_hat.kernel.theta)
        gs.append(fit.phi_hat.g)
    if not thetas:
        raise RuntimeError("all global lengthscale block fits failed")
    theta = np.exp(np.mean(np.log(np.vstack(thetas)), axis=0))
    return theta, float(np.median(gs))
