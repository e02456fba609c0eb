"""Kernels, hyperparameter containers and dense covariance assembly.

Lengthscales follow the convention ``k(h) = exp(-h**p / theta)`` for the
power-exponential family and ``u = h * sqrt(2 nu / theta)`` for the Matérn
family, so that a variogram range ``R`` corresponds to ``theta = R**2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.distance import cdist

POWEREXP = "powerexp"
MATERN = "matern"

MIN_JITTER = 1e-8


class KernelError(ValueError):
    """Invalid kernel configuration or argument shapes."""


@dataclass(frozen=True)
class Kernel:
    """Stationary correlation function.

    Parameters
    ----------
    family : {"powerexp", "matern"}
    lengthscales : array_like
        One value (isotropic, radial form) or one per input coordinate
        (ARD form).
    p : float
        Power-exponential exponent; ``p=2`` is the Gaussian kernel.
    nu : float
        Matérn smoothness, 1.5 or 2.5.
    separable : bool
        Only relevant for an ARD Matérn.  ``True`` takes the product of
        univariate kernels, ``False`` applies the radial kernel to the
        lengthscale-scaled distance.  For the power-exponential family
        the ARD form is always the product.
    """

    family: str = POWEREXP
    lengthscales: tuple = (1.0,)
    p: float = 2.0
    nu: float = 2.5
    separable: bool = True

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).ravel()
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in ls))
        if self.family not in (POWEREXP, MATERN):
            raise KernelError(f"unknown kernel family {self.family!r}")
        if len(ls) == 0 or not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise KernelError("lengthscales must be finite and strictly positive")
        if self.family == POWEREXP and not self.p > 0:
            raise KernelError("power-exponential exponent p must be positive")
        if self.family == MATERN and self.nu not in (1.5, 2.5):
            raise KernelError("Matérn smoothness must be 1.5 or 2.5")

    @classmethod
    def gaussian(cls, lengthscales=1.0) -> "Kernel":
        return cls(POWEREXP, lengthscales, p=2.0)

    @classmethod
    def matern(cls, lengthscales=1.0, nu=2.5, separable=True) -> "Kernel":
        return cls(MATERN, lengthscales, nu=nu, separable=separable)

    @property
    def theta(self) -> NDArray:
        return np.asarray(self.lengthscales)

    @property
    def isotropic(self) -> bool:
        return len(self.lengthscales) == 1

    @property
    def n_lengthscales(self) -> int:
        return len(self.lengthscales)

    def with_lengthscales(self, lengthscales) -> "Kernel":
        return replace(self, lengthscales=tuple(np.atleast_1d(lengthscales)))

    def check_dim(self, d: int) -> None:
        if not self.isotropic and self.n_lengthscales != d:
            raise KernelError(
                f"kernel has {self.n_lengthscales} lengthscales but inputs have {d} columns"
            )

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "lengthscales": list(self.lengthscales),
            "p": self.p,
            "nu": self.nu,
            "separable": self.separable,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Kernel":
        return cls(d["family"], tuple(d["lengthscales"]), d.get("p", 2.0),
                   d.get("nu", 2.5), d.get("separable", True))


@dataclass(frozen=True)
class Hyperparams:
    """Scale ``tau2``, nugget ``g`` and kernel: ``Sigma = tau2 (K + g I)``."""

    tau2: float = 1.0
    g: float = 0.0
    kernel: Kernel = field(default_factory=Kernel)

    def __post_init__(self):
        if not (np.isfinite(self.tau2) and self.tau2 > 0):
            raise KernelError("tau2 must be positive")
        if not (np.isfinite(self.g) and self.g >= 0):
            raise KernelError("nugget g must be nonnegative")

    def to_dict(self) -> dict:
        return {"tau2": self.tau2, "g": self.g, "kernel": self.kernel.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(d["tau2"], d["g"], Kernel.from_dict(d["kernel"]))


@dataclass(frozen=True)
class CovMatrix:
    matrix: NDArray
    includes_nugget: bool = True


def _as_2d(X: ArrayLike) -> NDArray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise KernelError("inputs must be a vector or a 2d array")
    return X


def _matern_from_u(u: NDArray, nu: float) -> NDArray:
    e = np.exp(-u)
    if nu == 1.5:
        return (1.0 + u) * e
    return (1.0 + u + u * u / 3.0) * e


def _matern_dk_du(u: NDArray, nu: float) -> NDArray:
    e = np.exp(-u)
    if nu == 1.5:
        return -u * e
    return -(u / 3.0) * (1.0 + u) * e


def _diffs(X1: NDArray, X2: NDArray) -> NDArray:
    return X1[:, None, :] - X2[None, :, :]


def sqdist(X1: ArrayLike, X2: ArrayLike | None = None) -> NDArray:
    """Squared Euclidean distances."""
    X1 = _as_2d(X1)
    X2 = X1 if X2 is None else _as_2d(X2)
    return cdist(X1, X2, "sqeuclidean")


def _scaled_sqdist(k: Kernel, X1: NDArray, X2: NDArray) -> NDArray:
    """Squared distance with each coordinate divided by sqrt(theta_k)."""
    s = np.sqrt(k.theta)
    same = X2 is X1
    X1 = X1 / s
    X2 = X1 if same else X2 / s
    return sqdist(X1, X2)


def kernel_matrix(k: Kernel, X1: ArrayLike, X2: ArrayLike | None = None) -> NDArray:
    """Correlation matrix with entries ``k(X1[i], X2[j])``."""
    X1 = _as_2d(X1)
    X2 = X1 if X2 is None else _as_2d(X2)
    if X1.shape[1] != X2.shape[1]:
        raise KernelError("X1 and X2 have different numbers of columns")
    k.check_dim(X1.shape[1])
    theta = k.theta
    if k.family == POWEREXP:
        if k.p == 2.0:
            # exp(-sum_k d_k^2 / theta_k), isotropic case broadcasts
            return np.exp(-_scaled_sqdist(k, X1, X2))
        if k.isotropic:
            h = np.sqrt(sqdist(X1, X2))
            return np.exp(-(h ** k.p) / theta[0])
        A = np.abs(_diffs(X1, X2)) ** k.p
        return np.exp(-np.sum(A / theta, axis=2))
    # Matérn
    if k.isotropic or not k.separable:
        u = np.sqrt(2.0 * k.nu * _scaled_sqdist(k, X1, X2))
        return _matern_from_u(u, k.nu)
    U = np.abs(_diffs(X1, X2)) * np.sqrt(2.0 * k.nu / theta)
    return np.prod(_matern_from_u(U, k.nu), axis=2)


def kernel_eval(k: Kernel, x1: ArrayLike, x2: ArrayLike) -> float:
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x1.shape != x2.shape or x1.ndim != 1:
        raise KernelError("x1 and x2 must be vectors of equal length")
    if np.array_equal(x1, x2):
        return 1.0
    return float(kernel_matrix(k, x1[None, :], x2[None, :])[0, 0])


def kernel_grad_theta(k: Kernel, X: ArrayLike, coord: int = 0,
                      K: NDArray | None = None, X2: ArrayLike | None = None) -> NDArray:
    """Elementwise derivative of the kernel matrix w.r.t. ``theta[coord]``.

    ``K`` may be passed to reuse an already computed ``kernel_matrix``.
    """
    X = _as_2d(X)
    Xb = X if X2 is None else _as_2d(X2)
    k.check_dim(X.shape[1])
    if not 0 <= coord < k.n_lengthscales:
        raise KernelError(f"coord {coord} out of range")
    theta = k.theta
    t = theta[coord]
    if K is None:
        K = kernel_matrix(k, X, Xb)
    if k.family == POWEREXP:
        if k.isotropic:
            H = sqdist(X, Xb) if k.p == 2.0 else np.sqrt(sqdist(X, Xb)) ** k.p
        else:
            dk = X[:, coord][:, None] - Xb[:, coord][None, :]
            H = dk * dk if k.p == 2.0 else np.abs(dk) ** k.p
        return K * H / (t * t)
    nu = k.nu
    if k.isotropic or not k.separable:
        u = np.sqrt(2.0 * nu * _scaled_sqdist(k, X, Xb))
        dku = _matern_dk_du(u, nu)
        if k.isotropic:
            # du/dtheta = -u / (2 theta)
            return dku * (-u / (2.0 * t))
        dk = X[:, coord][:, None] - Xb[:, coord][None, :]
        # u^2 = 2 nu sum d_k^2/theta_k, so du/dtheta_c = -nu d_c^2 / (theta_c^2 u)
        with np.errstate(divide="ignore", invalid="ignore"):
            du = np.where(u > 0, -nu * dk * dk / (t * t * u), 0.0)
        return dku * du
    dk = np.abs(X[:, coord][:, None] - Xb[:, coord][None, :])
    uc = dk * np.sqrt(2.0 * nu / t)
    kc = _matern_from_u(uc, nu)
    with np.errstate(divide="ignore", invalid="ignore"):
        rest = np.where(kc > 0, K / kc, 0.0)
    return rest * _matern_dk_du(uc, nu) * (-uc / (2.0 * t))


def kernel_blocks(k: Kernel, P: NDArray, grad: bool = False):
    """Batched correlation matrices for stacked point sets.

    Parameters
    ----------
    k : Kernel
    P : array, shape (B, n, d)
        ``B`` sets of ``n`` points each.
    grad : bool
        Also return the derivatives w.r.t. each lengthscale.

    Returns
    -------
    K : array, shape (B, n, n)
    dK : list of arrays, shape (B, n, n), only when ``grad``
    """
    P = np.asarray(P, dtype=float)
    k.check_dim(P.shape[2])
    D = P[:, :, None, :] - P[:, None, :, :]
    D2 = D * D
    theta = k.theta
    dK = []
    if k.family == POWEREXP:
        if k.isotropic:
            H = D2.sum(axis=3)
            if k.p != 2.0:
                H = H ** (k.p / 2.0)
            K = np.exp(-H / theta[0])
            if grad:
                dK.append(K * H / theta[0] ** 2)
        else:
            A = D2 if k.p == 2.0 else np.abs(D) ** k.p
            K = np.exp(-np.einsum("bijk,k->bij", A, 1.0 / theta))
            if grad:
                dK = [K * A[..., j] / theta[j] ** 2 for j in range(len(theta))]
        return (K, dK) if grad else K
    nu = k.nu
    if k.isotropic or not k.separable:
        r2 = np.einsum("bijk,k->bij", D2, 1.0 / theta) if not k.isotropic else D2.sum(3) / theta[0]
        u = np.sqrt(2.0 * nu * r2)
        K = _matern_from_u(u, nu)
        if grad:
            f1 = _matern_dk_du(u, nu)
            if k.isotropic:
                dK.append(f1 * (-u / (2.0 * theta[0])))
            else:
                with np.errstate(divide="ignore", invalid="ignore"):
                    base = np.where(u > 0, -nu * f1 / u, 0.0)
                dK = [base * D2[..., j] / theta[j] ** 2 for j in range(len(theta))]
        return (K, dK) if grad else K
    U = np.sqrt(D2 * (2.0 * nu / theta))
    F = _matern_from_u(U, nu)
    K = np.prod(F, axis=3)
    if grad:
        for j in range(len(theta)):
            rest = np.prod(np.delete(F, j, axis=3), axis=3)
            dK.append(rest * _matern_dk_du(U[..., j], nu) * (-U[..., j] / (2.0 * theta[j])))
    return (K, dK) if grad else K


def cov_assemble(phi: Hyperparams, X: ArrayLike) -> CovMatrix:
    """Dense ``tau2 (K + g I)``."""
    X = _as_2d(X)
    if X.shape[0] < 1:
        raise KernelError("need at least one input row")
    K = kernel_matrix(phi.kernel, X)
    K[np.diag_indices_from(K)] += phi.g
    return CovMatrix(phi.tau2 * K, includes_nugget=True)
