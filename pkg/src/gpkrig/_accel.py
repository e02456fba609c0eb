"""Compiled per-point loops for the Vecchia conditionals and ALC selection.

Each function mirrors a vectorized numpy reference elsewhere in the
package; the tests check the two against each other.
"""

from __future__ import annotations

import math

import numpy as np
from numba import config, njit, prange

# only one caller thread ever enters the parallel loop; avoids the TBB probe
config.THREADING_LAYER = "workqueue"

from .core import MATERN, POWEREXP, Kernel

_FAMILY = {POWEREXP: 0, MATERN: 1}


def kernel_args(k: Kernel):
    """Flatten a Kernel into the scalar arguments the compiled code expects."""
    return _FAMILY[k.family], float(k.p), float(k.nu), bool(k.separable), np.asarray(k.theta, float)


@njit(cache=True, inline="always")
def _mat(u, nu):
    e = math.exp(-u)
    if nu == 1.5:
        return (1.0 + u) * e
    return (1.0 + u + u * u / 3.0) * e


@njit(cache=True, inline="always")
def _mat_du(u, nu):
    e = math.exp(-u)
    if nu == 1.5:
        return -u * e
    return -(u / 3.0) * (1.0 + u) * e


@njit(cache=True)
def _pair(P, ia, ib, fam, p, nu, sep, theta, grad, want):
    """Kernel value between rows ``ia`` and ``ib`` of ``P``; fills ``grad`` when ``want``."""
    d = P.shape[1]
    q = theta.shape[0]
    if fam == 0:
        if q == 1:
            h2 = 0.0
            for j in range(d):
                t = P[ia, j] - P[ib, j]
                h2 += t * t
            H = h2 if p == 2.0 else h2 ** (p / 2.0)
            k = math.exp(-H / theta[0])
            if want:
                grad[0] = k * H / (theta[0] * theta[0])
            return k
        s = 0.0
        for j in range(d):
            t = P[ia, j] - P[ib, j]
            A = t * t if p == 2.0 else abs(t) ** p
            s += A / theta[j]
            if want:
                grad[j] = A
        k = math.exp(-s)
        if want:
            for j in range(d):
                grad[j] = k * grad[j] / (theta[j] * theta[j])
        return k
    if q == 1 or not sep:
        r2 = 0.0
        for j in range(d):
            t = P[ia, j] - P[ib, j]
            r2 += t * t / (theta[0] if q == 1 else theta[j])
        u = math.sqrt(2.0 * nu * r2)
        k = _mat(u, nu)
        if want:
            f1 = _mat_du(u, nu)
            if q == 1:
                grad[0] = f1 * (-u / (2.0 * theta[0]))
            else:
                for j in range(d):
                    t = P[ia, j] - P[ib, j]
                    grad[j] = -nu * f1 / u * t * t / (theta[j] * theta[j]) if u > 0 else 0.0
        return k
    k = 1.0
    for j in range(d):
        uj = abs(P[ia, j] - P[ib, j]) * math.sqrt(2.0 * nu / theta[j])
        k *= _mat(uj, nu)
    if want:
        for j in range(d):
            uj = abs(P[ia, j] - P[ib, j]) * math.sqrt(2.0 * nu / theta[j])
            rest = 1.0
            for l in range(d):
                if l != j:
                    rest *= _mat(abs(P[ia, l] - P[ib, l]) * math.sqrt(2.0 * nu / theta[l]), nu)
            grad[j] = rest * _mat_du(uj, nu) * (-uj / (2.0 * theta[j]))
    return k


@njit(cache=True)
def _chol_inplace(A, n):
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= A[j, k] * A[j, k]
        if not s > 0.0:
            return False
        s = math.sqrt(s)
        A[j, j] = s
        for i in range(j + 1, n):
            t = A[i, j]
            for k in range(j):
                t -= A[i, k] * A[j, k]
            A[i, j] = t / s
    return True


@njit(cache=True)
def _chol_solve(L, n, x):
    for i in range(n):
        t = x[i]
        for k in range(i):
            t -= L[i, k] * x[k]
        x[i] = t / L[i, i]
    for i in range(n - 1, -1, -1):
        t = x[i]
        for k in range(i + 1, n):
            t -= L[k, i] * x[k]
        x[i] = t / L[i, i]


@njit(cache=True, parallel=True)
def vecchia_terms(Xo, nugget, yo, nbrs, positions, fam, p, nu, sep, theta, want_y, want_grad,
                  s2_out, b_out, r_out, dq_out, dld_out):
    """Per-point conditional variance, weights, residual and gradient pieces.

    Returns a status flag: 0 if every block factored, else 1.
    """
    nq = theta.shape[0]
    m = nbrs.shape[1]
    npts = positions.shape[0]
    bad = np.zeros(npts, dtype=np.int64)
    for t in prange(npts):
        i = positions[t]
        c = 0
        while c < m and nbrs[i, c] >= 0:
            c += 1
        A = np.empty((c + 1, c + 1))
        pts = np.empty((c + 1, Xo.shape[1]))
        dA = np.zeros((nq, c + 1, c + 1))
        g = np.empty(nq)
        idx = np.empty(c + 1, dtype=np.int64)
        for a in range(c):
            idx[a] = nbrs[i, a]
        idx[c] = i
        for a in range(c + 1):
            for j in range(Xo.shape[1]):
                pts[a, j] = Xo[idx[a], j]
        for a in range(c + 1):
            A[a, a] = 1.0 + nugget[idx[a]]
            for bb in range(a):
                kv = _pair(pts, a, bb, fam, p, nu, sep, theta, g, want_grad)
                A[a, bb] = kv
                A[bb, a] = kv
                if want_grad:
                    for j in range(nq):
                        dA[j, a, bb] = g[j]
                        dA[j, bb, a] = g[j]
        L = A.copy()
        if not _chol_inplace(L, c):
            bad[t] = 1
            continue
        bvec = np.empty(c)
        for a in range(c):
            bvec[a] = A[a, c]
        _chol_solve(L, c, bvec)
        s2 = A[c, c]
        for a in range(c):
            s2 -= A[a, c] * bvec[a]
        if not s2 > 0.0:
            bad[t] = 1
            continue
        s2_out[t] = s2
        for a in range(c):
            b_out[t, a] = bvec[a]
        if not want_y:
            continue
        r = yo[i]
        for a in range(c):
            r -= bvec[a] * yo[idx[a]]
        r_out[t] = r
        if not want_grad:
            continue
        beta = np.empty(c)
        for a in range(c):
            beta[a] = yo[idx[a]]
        _chol_solve(L, c, beta)
        u = np.empty(c + 1)
        bt = np.zeros(c + 1)
        for a in range(c):
            u[a] = -bvec[a]
            bt[a] = beta[a]
        u[c] = 1.0
        # nugget direction: identity on entries carrying a nugget
        uAu = 0.0
        uAb = 0.0
        for a in range(c + 1):
            if nugget[idx[a]] > 0:
                uAu += u[a] * u[a]
                uAb += u[a] * bt[a]
        dq_out[t, 0] = -(2.0 * r / s2 * uAb + r * r / (s2 * s2) * uAu)
        dld_out[t, 0] = uAu / s2
        for j in range(nq):
            uAu = 0.0
            uAb = 0.0
            for a in range(c + 1):
                Au = 0.0
                for bb in range(c + 1):
                    Au += dA[j, a, bb] * u[bb]
                uAu += u[a] * Au
                uAb += bt[a] * Au
            dq_out[t, 1 + j] = -(2.0 * r / s2 * uAb + r * r / (s2 * s2) * uAu)
            dld_out[t, 1 + j] = uAu / s2
    return 0 if bad.sum() == 0 else 1


@njit(cache=True)
def alc_greedy(P, nc, n0, m, g, fam, p, nu, sep, theta):
    """Greedy ALC over candidate rows ``P[:nc]`` for the reference site ``P[nc]``.

    The first ``n0`` candidates are the seed.  Returns the selected
    candidate positions in order of acquisition.
    """
    d = P.shape[1]
    nq = theta.shape[0]
    gr = np.empty(nq)
    Kc = np.zeros((nc + 1, m))
    G = np.zeros((nc + 1, m))
    for i in range(nc + 1):
        for j in range(n0):
            Kc[i, j] = 1.0 if i == j else _pair(P, i, j, fam, p, nu, sep, theta, gr, False)
    C = np.empty((n0, n0))
    for i in range(n0):
        for j in range(n0):
            C[i, j] = Kc[i, j]
        C[i, i] += g
    Ci = np.linalg.inv(C)
    for i in range(nc + 1):
        for j in range(n0):
            t = 0.0
            for l in range(n0):
                t += Kc[i, l] * Ci[l, j]
            G[i, j] = t
    s = np.zeros(nc + 1)
    tt = np.zeros(nc + 1)
    kx = np.empty(nc + 1)
    for i in range(nc + 1):
        a = 0.0
        b = 0.0
        for j in range(n0):
            a += G[i, j] * Kc[i, j]
            b += G[i, j] * Kc[nc, j]
        s[i] = a
        tt[i] = b
        kx[i] = 1.0 if i == nc else _pair(P, i, nc, fam, p, nu, sep, theta, gr, False)
    chosen = np.zeros(nc, dtype=np.bool_)
    sel = np.empty(m, dtype=np.int64)
    for j in range(n0):
        chosen[j] = True
        sel[j] = j
    cur = n0
    ka = np.empty(nc + 1)
    w = np.empty(nc + 1)
    u = np.empty(m)
    while cur < m:
        best = -1.0
        arg = -1
        for c in range(nc):
            if chosen[c]:
                continue
            den = 1.0 + g - s[c]
            if not den > 1e-12 * (1.0 + g):
                continue
            num = kx[c] - tt[c]
            v = num * num / den
            if v > best:
                best = v
                arg = c
        if arg < 0:
            break
        mu = 1.0 / (1.0 + g - s[arg])
        for j in range(cur):
            u[j] = G[arg, j]
        for i in range(nc + 1):
            ka[i] = 1.0 if i == arg else _pair(P, i, arg, fam, p, nu, sep, theta, gr, False)
        for i in range(nc + 1):
            t = 0.0
            for j in range(cur):
                t += G[i, j] * Kc[arg, j]
            w[i] = t - ka[i]
        for i in range(nc + 1):
            wi = mu * w[i]
            for j in range(cur):
                G[i, j] += wi * u[j]
            G[i, cur] = -wi
            Kc[i, cur] = ka[i]
            s[i] += wi * w[i]
            tt[i] += wi * w[nc]
        chosen[arg] = True
        sel[cur] = arg
        cur += 1
    return sel[:cur]
