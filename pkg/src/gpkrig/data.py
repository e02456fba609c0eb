"""Datasets, input coding, assay CSV ingestion and synthetic generators."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import Hyperparams, Kernel, MATERN, POWEREXP, _as_2d

TOY = "toy"  # 2 + 2 sin(4 pi x)
CENSORED_TOY = "censored"  # 2 sin(4 pi x), censored at y = 1


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class CensorSpec:
    """Per-record censoring flags and detection limits.

    ``direction="upper"`` means a censored record's true value lies at or
    below its threshold (left-censoring); ``"lower"`` the reverse.
    """

    censored: NDArray
    threshold: NDArray
    direction: str = "upper"

    def __post_init__(self):
        c = np.asarray(self.censored, dtype=bool).ravel()
        t = np.asarray(self.threshold, dtype=float).ravel()
        object.__setattr__(self, "censored", c)
        object.__setattr__(self, "threshold", t)
        if c.shape != t.shape:
            raise DataError("censored flags and thresholds differ in length")
        if not np.all(np.isfinite(t[c])):
            raise DataError("censored records need a finite threshold")
        if np.any(np.isfinite(t[~c])):
            raise DataError("observed records must not carry a threshold")
        if self.direction not in ("upper", "lower"):
            raise DataError("direction must be 'upper' or 'lower'")

    @classmethod
    def none(cls, n: int) -> "CensorSpec":
        return cls(np.zeros(n, bool), np.full(n, np.nan))

    @property
    def n_censored(self) -> int:
        return int(self.censored.sum())

    def subset(self, idx) -> "CensorSpec":
        return CensorSpec(self.censored[idx], self.threshold[idx], self.direction)


@dataclass(frozen=True)
class Coding:
    """Min-max input coding plus an optional log and centering of the response."""

    offset: NDArray
    scale: NDArray
    log_response: bool = False
    y_mean: float = 0.0

    def encode_X(self, X: ArrayLike) -> NDArray:
        return (_as_2d(X) - self.offset) / self.scale

    def decode_X(self, Xc: ArrayLike) -> NDArray:
        return _as_2d(Xc) * self.scale + self.offset

    def encode_y(self, y: ArrayLike) -> NDArray:
        y = np.asarray(y, dtype=float)
        if self.log_response:
            if np.any(y <= 0):
                raise DataError("log coding needs positive responses")
            y = np.log(y)
        return y - self.y_mean

    def decode_y(self, yc: ArrayLike) -> NDArray:
        y = np.asarray(yc, dtype=float) + self.y_mean
        return np.exp(y) if self.log_response else y

    def to_dict(self) -> dict:
        return {"offset": self.offset.tolist(), "scale": self.scale.tolist(),
                "log_response": self.log_response, "y_mean": self.y_mean}

    @classmethod
    def from_dict(cls, d: dict) -> "Coding":
        return cls(np.asarray(d["offset"], float), np.asarray(d["scale"], float),
                   bool(d["log_response"]), float(d["y_mean"]))


def code_inputs(X: ArrayLike, Y: ArrayLike | None = None, log_response: bool = False,
                center: bool = True) -> Coding:
    """Coding that maps each input column onto [0, 1].

    With ``log_response`` the response is log-transformed before centering.
    """
    X = _as_2d(X)
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    if np.any(span <= 0):
        raise DataError(f"constant coordinate column(s): {np.flatnonzero(span <= 0).tolist()}")
    ym = 0.0
    if Y is not None and center:
        y = np.asarray(Y, dtype=float)
        if log_response:
            if np.any(y <= 0):
                raise DataError("log coding needs positive responses")
            y = np.log(y)
        ym = float(np.mean(y))
    return Coding(lo, span, log_response, ym)


@dataclass
class Dataset:
    """Inputs, responses, hole labels and censoring for one data set.

    ``Y`` holds recorded values; for censored records that is the
    detection limit.  ``truth`` optionally keeps the latent (uncensored)
    responses of synthetic data.
    """

    X: NDArray
    Y: NDArray
    hole_id: NDArray
    censor: CensorSpec
    coding: Coding | None = None
    truth: NDArray | None = None
    columns: tuple = ()

    def __post_init__(self):
        self.X = _as_2d(self.X)
        self.Y = np.asarray(self.Y, dtype=float).ravel()
        self.hole_id = np.asarray(self.hole_id).ravel()
        n = self.X.shape[0]
        if len(self.Y) != n or len(self.hole_id) != n or len(self.censor.censored) != n:
            raise DataError("dataset fields differ in length")
        if not self.columns:
            self.columns = tuple(f"x{j + 1}" for j in range(self.X.shape[1]))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], Y=self.Y[idx], hole_id=self.hole_id[idx],
                       censor=self.censor.subset(idx),
                       truth=None if self.truth is None else self.truth[idx])

    def coded(self, coding: Coding | None = None, log_response: bool = False) -> "Dataset":
        """Copy with inputs coded to the unit cube (coding fitted here unless given)."""
        if coding is None:
            coding = code_inputs(self.X, self.Y, log_response)
        thr = self.censor.threshold.copy()
        c = self.censor.censored
        thr[c] = coding.encode_y(thr[c])
        truth = None if self.truth is None else coding.encode_y(self.truth)
        return replace(self, X=coding.encode_X(self.X), Y=coding.encode_y(self.Y),
                       censor=CensorSpec(c, thr, self.censor.direction), coding=coding, truth=truth)

    def fingerprint(self) -> str:
        """SHA-256 over inputs, responses, hole labels and censoring."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.Y).tobytes())
        h.update("\x1f".join(map(str, self.hole_id)).encode())
        h.update(self.censor.censored.tobytes())
        return h.hexdigest()


def _num(cell, line, col):
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"line {line}, column {col!r}: non-numeric value {cell!r}") from None


def load_assay_csv(path, coords=("x", "y", "z"), value: str = "value", hole: str = "hole_id",
                   censored: str = "censored", limit: str = "detection_limit") -> Dataset:
    """Read an assay CSV with a header row.

    Required columns are ``hole`` (optional when absent: every row is its
    own hole), the ``coords`` and ``value``; ``censored`` (0/1) and
    ``limit`` are optional.  Censored rows take their detection limit as
    recorded value.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in (*coords, value) if c not in header]
        if missing:
            raise DataError(f"{path}: missing required column(s) {missing}")
        col = {h: i for i, h in enumerate(header)}
        X, Y, H, C, T = [], [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            xs = []
            for c in coords:
                cell = row[col[c]].strip()
                if cell == "" or cell.lower() in ("na", "nan"):
                    raise DataError(f"line {line}, column {c!r}: missing coordinate")
                xs.append(_num(cell, line, c))
            is_c = False
            if censored in col:
                flag = row[col[censored]].strip()
                if flag not in ("", "0", "1"):
                    raise DataError(f"line {line}, column {censored!r}: expected 0 or 1, got {flag!r}")
                is_c = flag == "1"
            thr = math.nan
            if is_c:
                cell = row[col[limit]].strip() if limit in col else ""
                if cell == "":
                    raise DataError(f"line {line}: censored record without {limit!r}")
                thr = _num(cell, line, limit)
                y = thr
            else:
                y = _num(row[col[value]].strip(), line, value)
            X.append(xs)
            Y.append(y)
            H.append(row[col[hole]].strip() if hole in col else str(line - 1))
            C.append(is_c)
            T.append(thr)
    if not X:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(X), np.array(Y), np.array(H, dtype=object),
                   CensorSpec(np.array(C), np.array(T)), columns=tuple(coords))


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_assay_csv(path, ds: Dataset, values: ArrayLike | None = None,
                    imputed: ArrayLike | None = None) -> None:
    """Write ``ds`` in the assay schema; ``imputed`` adds a 0/1 provenance column."""
    Y = ds.Y if values is None else np.asarray(values, float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["hole_id", *ds.columns, "value", "censored", "detection_limit"]
        if imputed is not None:
            head.append("imputed")
        w.writerow(head)
        for i in range(ds.n):
            c = bool(ds.censor.censored[i])
            row = [ds.hole_id[i], *(_fmt(v) for v in ds.X[i]), _fmt(Y[i]), int(c),
                   _fmt(ds.censor.threshold[i]) if c else ""]
            if imputed is not None:
                row.append(int(imputed[i]))
            w.writerow(row)


def load_meuse() -> Dataset:
    """Bundled Meuse river zinc data (155 topsoil samples, ppm, metre coordinates)."""
    with resources.files("gpkrig").joinpath("data/meuse_zinc.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    X = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    Y = np.array([float(r["value"]) for r in rows])
    H = np.array([r["hole_id"] for r in rows], dtype=object)
    return Dataset(X, Y, H, CensorSpec.none(len(Y)), columns=("x", "y"))


def toy_truth(variant: str = TOY) -> Callable[[NDArray], NDArray]:
    if variant == TOY:
        return lambda x: 2.0 + 2.0 * np.sin(4.0 * np.pi * np.asarray(x, float))
    if variant == CENSORED_TOY:
        return lambda x: 2.0 * np.sin(4.0 * np.pi * np.asarray(x, float))
    raise ValueError(f"unknown toy variant {variant!r}")


def gen_synthetic_1d(n: int, noise_var: float = 0.1, threshold: float | None = None,
                     variant: str = TOY, rng: np.random.Generator | None = None):
    """Uniform inputs on [0, 1] with responses ``f(x) + N(0, noise_var)``.

    Records at or below ``threshold`` are left-censored (recorded at the
    threshold).  Returns the dataset and the truth function.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    rng = rng if rng is not None else np.random.default_rng()
    f = toy_truth(variant)
    x = rng.uniform(0.0, 1.0, n)
    y = f(x) + rng.normal(0.0, math.sqrt(noise_var), n) if noise_var > 0 else f(x)
    truth = y.copy()
    if threshold is None:
        cs = CensorSpec.none(n)
    else:
        c = y <= threshold
        cs = CensorSpec(c, np.where(c, threshold, np.nan))
        y = np.where(c, threshold, y)
    ds = Dataset(x[:, None], y, np.arange(n).astype(str).astype(object), cs, truth=truth,
                 columns=("x",))
    return ds, f


class RandomFeatureField:
    """Stationary Gaussian field drawn with random Fourier features.

    ``f(x) = sqrt(2 tau2 / F) sum_k cos(w_k . x + b_k)`` approximates a GP
    with the given kernel as the number of features ``F`` grows.
    """

    def __init__(self, phi: Hyperparams, d: int, n_features: int = 2000,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        k = phi.kernel
        th = np.broadcast_to(k.theta, (d,))
        z = rng.standard_normal((n_features, d))
        if k.family == POWEREXP:
            if k.p != 2.0:
                raise ValueError("random features need the Gaussian (p = 2) kernel")
            W = z * np.sqrt(2.0 / th)
        elif k.family == MATERN and (k.isotropic or not k.separable):
            # multivariate t with 2 nu degrees of freedom, scaled by 1/sqrt(theta)
            v = rng.chisquare(2.0 * k.nu, n_features)
            W = z * np.sqrt(2.0 * k.nu / v)[:, None] / np.sqrt(th)
        else:
            raise ValueError("random features support Gaussian and radial Matérn kernels")
        self.W = W
        self.b = rng.uniform(0.0, 2.0 * np.pi, n_features)
        self.amp = math.sqrt(2.0 * phi.tau2 / n_features)

    def __call__(self, X: ArrayLike, chunk: int = 8192) -> NDArray:
        X = _as_2d(X)
        out = np.empty(X.shape[0])
        for s in range(0, X.shape[0], chunk):
            out[s:s + chunk] = self.amp * np.cos(X[s:s + chunk] @ self.W.T + self.b).sum(axis=1)
        return out


DEFAULT_BOREHOLE_TRUTH = Hyperparams(1.0, 0.05, Kernel.gaussian([0.02, 0.02, 0.005]))


def gen_synthetic_boreholes(n_holes: int = 4000, pts_per_hole: int = 40,
                            domain=((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)),
                            gp_truth: Hyperparams = DEFAULT_BOREHOLE_TRUTH,
                            censor_frac: float = 0.0, max_inclination_deg: float = 10.0,
                            n_features: int = 2000,
                            rng: np.random.Generator | None = None) -> Dataset:
    """Synthetic drill-hole assays.

    Collars are uniform on the top face of ``domain``; each hole runs
    downward with a random inclination up to ``max_inclination_deg`` from
    vertical and random azimuth, sampled at equally spaced depths.  The
    number of samples per hole is uniform on ``[pts/2, 3 pts/2]``.  The
    field is a random-feature GP draw with ``gp_truth`` plus nugget noise.
    The lowest ``censor_frac`` fraction of records is left-censored at the
    corresponding empirical quantile.
    """
    if n_holes < 1 or pts_per_hole < 1:
        raise ValueError("counts must be positive")
    if not 0.0 <= censor_frac < 1.0:
        raise DataError(f"censor_frac must be in [0, 1), got {censor_frac}")
    rng = rng if rng is not None else np.random.default_rng()
    dom = np.asarray(domain, dtype=float)
    if dom.shape != (3, 2) or np.any(dom[:, 1] <= dom[:, 0]):
        raise ValueError("domain must be three increasing (lo, hi) pairs")
    lo, hi = dom[:, 0], dom[:, 1]
    depth = hi[2] - lo[2]
    counts = rng.integers(max(pts_per_hole // 2, 1), pts_per_hole + pts_per_hole // 2 + 1, n_holes)
    collar = np.column_stack([rng.uniform(lo[0], hi[0], n_holes),
                              rng.uniform(lo[1], hi[1], n_holes), np.full(n_holes, hi[2])])
    inc = np.deg2rad(rng.uniform(0.0, max_inclination_deg, n_holes))
    az = rng.uniform(0.0, 2.0 * np.pi, n_holes)
    direc = np.column_stack([np.sin(inc) * np.cos(az), np.sin(inc) * np.sin(az), -np.cos(inc)])
    length = depth * rng.uniform(0.6, 1.0, n_holes)
    hole = np.repeat(np.arange(n_holes), counts)
    step = np.concatenate([(np.arange(c) + 0.5) / c for c in counts])
    X = collar[hole] + direc[hole] * (step * length[hole])[:, None]
    X = np.clip(X, lo, hi)
    field_ = RandomFeatureField(gp_truth, 3, n_features, rng)
    y = field_(X) + rng.normal(0.0, math.sqrt(gp_truth.tau2 * gp_truth.g), len(X))
    truth = y.copy()
    if censor_frac > 0:
        thr = float(np.quantile(y, censor_frac))
        c = y <= thr
        cs = CensorSpec(c, np.where(c, thr, np.nan))
        y = np.where(c, thr, y)
    else:
        cs = CensorSpec.none(len(y))
    ids = np.array([f"H{h:05d}" for h in hole], dtype=object)
    return Dataset(X, y, ids, cs, truth=truth, columns=("x", "y", "z"))
