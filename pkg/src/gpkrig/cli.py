"""Command-line entry point: ``gpkrig {synth,fit,predict,variogram,cv,impute}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .censoring import ENGINES, mixture_moments, multiple_impute
from .core import Hyperparams, Kernel
from .data import (CENSORED_TOY, TOY, Coding, DataError, Dataset, code_inputs, gen_synthetic_1d,
                   gen_synthetic_boreholes, load_assay_csv, write_assay_csv)
from .evaluation import MODELS, CVConfig, run_cv, substream
from .gp_exact import condition, default_init, fit_mle, predict
from .lagp import LAGPConfig, lagp_predict_batch, remediated_result, slagp_predict_batch
from .locality import ALC, NN, estimate_global_lengthscales
from .variography import empirical_semivariogram, fit_nls
from .vecchia import VecchiaFit, fit_svecchia, vecchia_predict, with_training

log = logging.getLogger("gpkrig")

FIT_FORMAT = "gpkrig-fit"
FIT_MODELS = ("gp", "subset", "lagp", "slagp", "svecchia")
KERNELS = {
    "gaussian": lambda: Kernel.gaussian(),
    "matern32": lambda: Kernel.matern(nu=1.5),
    "matern52": lambda: Kernel.matern(nu=2.5),
}
MAX_EXACT = 5000


@dataclass(frozen=True)
class RunConfig:
    """Defaults for every subcommand; a ``--config`` JSON file may override any field."""

    model: str = "gp"
    kernel: str = "gaussian"
    coords: tuple = ()  # empty: every column other than the reserved ones
    value: str = "value"
    hole: str = "hole_id"
    log_response: bool = False
    gp_restarts: int = 2
    subset_m: int = 2000
    lagp_m: int = 50
    lagp_method: str = ALC
    lagp_n0: int = 6
    remediate: bool = False
    vecchia_m: int = 25
    vecchia_rounds: int = 3
    vecchia_kernel: str = "matern52"
    M: int = 5
    K: int = 10
    impute: bool = False
    bin_width: float = 0.02
    h_max: float = 0.3
    vgram_family: str = "powerexp"
    vgram_weights: str = "equal"

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        for name in ("kernel", "vecchia_kernel"):
            if getattr(self, name) not in KERNELS:
                raise ValueError(f"{name} must be one of {tuple(KERNELS)}, "
                                 f"got {getattr(self, name)!r}")
        if self.lagp_method not in (NN, ALC):
            raise ValueError("lagp_method must be 'NN' or 'ALC'")
        for name in ("subset_m", "lagp_m", "vecchia_m", "vecchia_rounds", "M", "K"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lagp_m < 2 or (self.lagp_method == ALC and not 0 < self.lagp_n0 < self.lagp_m):
            raise ValueError("need lagp_m >= 2 and, for ALC, 0 < lagp_n0 < lagp_m")
        if not 0 < self.bin_width < self.h_max:
            raise ValueError("need 0 < bin_width < h_max")
        object.__setattr__(self, "coords", tuple(self.coords))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            d = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"{path}: unknown config key(s) {bad}")
        return cls(**d)

    def make_kernel(self) -> Kernel:
        return KERNELS[self.kernel]()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["coords"] = list(self.coords)
        return d

    def lagp_config(self, threads: int, seed: int) -> LAGPConfig:
        return LAGPConfig(m=self.lagp_m, method=self.lagp_method, n0=self.lagp_n0,
                          kernel=self.make_kernel(), threads=threads, seed=seed)

    def cv_config(self, threads: int, seed: int) -> CVConfig:
        return CVConfig(K=self.K, subset_m=self.subset_m, gp_restarts=self.gp_restarts,
                        lagp=self.lagp_config(threads, seed), vecchia_m=self.vecchia_m,
                        vecchia_rounds=self.vecchia_rounds, remediate=self.remediate,
                        impute=self.impute, M=self.M, ok_bin_width=self.bin_width,
                        ok_h_max=self.h_max)


def _fmt(v) -> str:
    return format(float(v), ".17g")


RESERVED = ("censored", "detection_limit", "imputed")


def _load(path, cfg: RunConfig) -> Dataset:
    coords = cfg.coords
    if not coords:
        with open(path, newline="") as fh:
            header = [h.strip() for h in next(csv.reader(fh), [])]
        coords = tuple(h for h in header if h not in (cfg.hole, cfg.value, *RESERVED))
    return load_assay_csv(path, coords=coords, value=cfg.value, hole=cfg.hole)


def _coded(ds: Dataset, cfg: RunConfig, coding=None):
    if coding is None:
        coding = code_inputs(ds.X, ds.Y, cfg.log_response, center=False)
    return ds.coded(coding), coding


def _observed(ds: Dataset) -> Dataset:
    return ds.subset(np.flatnonzero(~ds.censor.censored))


def _read_sites(path, coords) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: no sites")
    missing = [c for c in coords if c not in rows[0]]
    if missing:
        raise DataError(f"{path}: missing coordinate column(s) {missing}")
    out = np.empty((len(rows), len(coords)))
    for i, r in enumerate(rows):
        for j, c in enumerate(coords):
            try:
                out[i, j] = float(r[c])
            except ValueError:
                raise DataError(f"{path}: line {i + 2}, column {c!r}: non-numeric "
                                f"value {r[c]!r}") from None
    return out


def _write_predictions(path, coords, sites, mean, var, err=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*coords, "mean", "var"] + (["error_code"] if err is not None else []))
        for i in range(len(mean)):
            row = [*(_fmt(v) for v in sites[i]), _fmt(mean[i]), _fmt(var[i])]
            if err is not None:
                row.append(int(err[i]))
            w.writerow(row)


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommands --------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    rng = substream(args.seed, "synth")
    if args.toy1d:
        variant = CENSORED_TOY if args.variant == "censored" else TOY
        ds, _ = gen_synthetic_1d(args.n, args.noise, args.threshold, variant, rng)
    else:
        ds = gen_synthetic_boreholes(args.holes, args.pts, censor_frac=args.censor_frac, rng=rng)
    write_assay_csv(args.out, ds)
    log.info("wrote %d records (%d censored) to %s", ds.n, ds.censor.n_censored, args.out)
    return 0


def cmd_fit(args, cfg: RunConfig) -> int:
    model = args.model or cfg.model
    if model not in FIT_MODELS:
        raise ValueError(f"fit supports {FIT_MODELS}, got {model!r}")
    raw = _load(args.data, cfg)
    ds, coding = _coded(_observed(raw), cfg)
    rng = substream(args.seed, "fit")
    doc = {"format": FIT_FORMAT, "version": __version__, "model": model,
           "coding": coding.to_dict(), "coords": list(raw.columns), "seed": args.seed,
           "data": {"path": str(args.data), "n": raw.n,
                    "fingerprint": raw.fingerprint()},
           "config": cfg.to_dict()}
    if model == "gp":
        if ds.n > MAX_EXACT:
            raise ValueError(f"exact GP on {ds.n} records; use --model subset or svecchia")
        fit = fit_mle(ds.X, ds.Y, _init(ds, cfg), restarts=cfg.gp_restarts)
        doc["hyperparameters"] = fit.phi_hat.to_dict()
        doc["loglik"] = fit.loglik
    elif model == "subset":
        m = min(cfg.subset_m, ds.n)
        idx = np.sort(rng.choice(ds.n, m, replace=False))
        fit = fit_mle(ds.X[idx], ds.Y[idx], _init(ds.subset(idx), cfg), restarts=cfg.gp_restarts)
        doc["hyperparameters"] = fit.phi_hat.to_dict()
        doc["subset"] = idx.tolist()
        doc["loglik"] = fit.loglik
    elif model == "svecchia":
        fit = fit_svecchia(ds.X, ds.Y, m=cfg.vecchia_m, max_rounds=cfg.vecchia_rounds,
                           kernel=_vecchia_kernel(cfg, ds.d), rng=rng)
        doc["hyperparameters"] = fit.phi_hat.to_dict()
        doc["vecchia_m"] = fit.m
        doc["loglik"] = fit.loglik
    elif model == "slagp":
        theta, g = estimate_global_lengthscales(ds.X, ds.Y, rng=rng, kernel=cfg.make_kernel())
        doc["theta_global"] = theta.tolist()
        doc["g_global"] = g
    _write_json(args.out, doc)
    log.info("wrote %s fit to %s", model, args.out)
    return 0


def _init(ds, cfg):
    return default_init(ds.X, kernel=cfg.make_kernel())


def _vecchia_kernel(cfg, d):
    k = KERNELS[cfg.vecchia_kernel]()
    if k.family == "matern":
        # ARD lengthscales on a radial distance, the scaled-Vecchia default
        return Kernel.matern(np.ones(d), nu=k.nu, separable=False)
    return k.with_lengthscales(np.ones(d))


def cmd_predict(args, cfg: RunConfig) -> int:
    with open(args.fit) as fh:
        doc = json.load(fh)
    if doc.get("format") != FIT_FORMAT:
        raise ValueError(f"{args.fit} is not a fit file")
    fcfg = RunConfig(**doc["config"])
    data_path = args.data or doc["data"]["path"]
    raw = _load(data_path, fcfg)
    if raw.fingerprint() != doc["data"]["fingerprint"]:
        if not args.force:
            raise ValueError(f"training data {data_path} does not match the fit's fingerprint "
                             "(use --force to override)")
        log.warning("data fingerprint mismatch ignored (--force)")
    coding = Coding.from_dict(doc["coding"])
    ds, _ = _coded(_observed(raw), fcfg, coding)
    coords = tuple(doc["coords"])
    sites = _read_sites(args.sites, coords)
    Xs = coding.encode_X(sites)
    model = doc["model"]
    err = None
    if model in ("gp", "subset", "svecchia"):
        phi = Hyperparams.from_dict(doc["hyperparameters"])
    if model == "gp":
        p = predict(condition(ds.X, ds.Y, phi), Xs)
    elif model == "subset":
        idx = np.asarray(doc["subset"], dtype=int)
        p = predict(condition(ds.X[idx], ds.Y[idx], phi), Xs)
    elif model == "svecchia":
        vf = _vecchia_from(phi, ds, doc["vecchia_m"])
        p = vecchia_predict(vf, Xs, joint=False)
    else:
        lc = fcfg.lagp_config(args.threads, args.seed)
        if model == "slagp":
            res = slagp_predict_batch(ds.X, ds.Y, Xs, lc, theta_global=doc["theta_global"])
        else:
            res = lagp_predict_batch(ds.X, ds.Y, Xs, lc)
        if fcfg.remediate:
            res = remediated_result(res, ds.X, ds.Y)
        p, err = res.pred, res.errors
    _write_predictions(args.out, coords, sites, p.mean, p.var, err)
    log.info("wrote %d predictions to %s", len(p.mean), args.out)
    return 0


def _vecchia_from(phi, ds, m):
    # a shell fit carrying the stored hyperparameters; prediction rebuilds neighbors
    ym = float(np.mean(ds.Y))
    shell = VecchiaFit(phi, None, ds.X, ds.Y - ym, ym, m, float("nan"))
    return with_training(shell, ds.X, ds.Y)


def cmd_variogram(args, cfg: RunConfig) -> int:
    ds, _ = _coded(_observed(_load(args.data, cfg)), cfg)
    rng = substream(args.seed, "variogram")
    ev = empirical_semivariogram(ds.X, ds.Y, cfg.bin_width, cfg.h_max,
                                 max_points=args.max_points, rng=rng)
    ev.to_csv(args.out)
    if args.json:
        vm = fit_nls(ev, family=cfg.vgram_family, weights=cfg.vgram_weights)
        _write_json(args.json, {"model": vm.to_dict(), "bin_width": cfg.bin_width,
                                "h_max": cfg.h_max, "coordinates": "coded"})
    return 0


def cmd_cv(args, cfg: RunConfig) -> int:
    models = args.model.split(",") if args.model else [cfg.model]
    if args.k is not None:
        cfg = dataclasses.replace(cfg, K=args.k)
    if args.impute:
        cfg = dataclasses.replace(cfg, impute=True)
    ds, _ = _coded(_load(args.data, cfg), cfg)
    cvc = dataclasses.replace(cfg.cv_config(args.threads, args.seed),
                              vecchia_kernel=_vecchia_kernel(cfg, ds.d))
    res = run_cv(ds, models, cvc, seed=args.seed)
    res.to_json(args.out, timing=args.timing)
    if args.csv:
        res.to_csv(args.csv, timing=args.timing)
    for m, s in res.summary().items():
        log.info("%s: median rmse %.6g, errors %d", m, s.get("median_rmse", float("nan")),
                 s["n_errors"])
    return 0


def cmd_impute(args, cfg: RunConfig) -> int:
    raw = _load(args.data, cfg)
    ds, coding = _coded(raw, cfg)
    c = ds.censor.censored
    if not c.any():
        raise ValueError("the data set has no censored records")
    Xs = coding.encode_X(_read_sites(args.sites, raw.columns)) if args.sites else ds.X[:1]
    run = multiple_impute(ds.X[~c], ds.Y[~c], ds.X[c], ds.censor.threshold[c], Xs, M=cfg.M,
                          engine=args.engine, rng=substream(args.seed, "impute"),
                          lagp_config=cfg.lagp_config(args.threads, args.seed),
                          vecchia_m=cfg.vecchia_m, direction=ds.censor.direction)
    stem = Path(args.out)
    for r, vals in enumerate(run.imputed, start=1):
        y = raw.Y.copy()
        y[c] = coding.decode_y(vals)
        path = stem.with_name(f"{stem.stem}_{r}{stem.suffix}") if cfg.M > 1 else stem
        write_assay_csv(path, raw, values=y, imputed=c)
    if args.sites:
        mu, var = mixture_moments(run)
        _write_predictions(args.pred_out, raw.columns, coding.decode_X(Xs), mu, var)
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpkrig", description="GP and kriging tools for assay data")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (default: all cores; 1 = serial reference path)")
    p.add_argument("--config", help="JSON file overriding defaults")
    p.add_argument("--coords", help="comma-separated coordinate columns (default: auto)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic data")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--toy1d", action="store_true", help="1d sine toy")
    g.add_argument("--boreholes", action="store_true", help="3d drill-hole field")
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--variant", choices=("toy", "censored"), default="toy")
    s.add_argument("--holes", type=int, default=4000)
    s.add_argument("--pts", type=int, default=40)
    s.add_argument("--censor-frac", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", help="fit a model and write a JSON fit file")
    s.add_argument("--data", required=True)
    s.add_argument("--model", choices=FIT_MODELS)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", help="predict at sites from a fit file")
    s.add_argument("--fit", required=True)
    s.add_argument("--sites", required=True)
    s.add_argument("--data", help="training data (default: path stored in the fit)")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="ignore a data fingerprint mismatch")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("variogram", help="empirical semivariogram and NLS fit")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="binned estimate CSV")
    s.add_argument("--json", help="fitted model JSON")
    s.add_argument("--max-points", type=int, default=None)
    s.set_defaults(func=cmd_variogram)

    s = sub.add_parser("cv", help="borehole-preserving cross-validation")
    s.add_argument("--data", required=True)
    s.add_argument("--model", help=f"comma-separated subset of {','.join(MODELS)}")
    s.add_argument("--k", type=int)
    s.add_argument("--impute", action="store_true")
    s.add_argument("--timing", action="store_true",
                   help="include wall-clock times (makes output run-dependent)")
    s.add_argument("--out", required=True, help="metrics JSON")
    s.add_argument("--csv", help="flat per-fold CSV")
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("impute", help="multiple imputation of censored records")
    s.add_argument("--data", required=True)
    s.add_argument("--engine", choices=ENGINES, default="slagp")
    s.add_argument("--out", required=True, help="imputed CSV (suffixed _1.._M)")
    s.add_argument("--sites", help="sites CSV for mixture predictions")
    s.add_argument("--pred-out", help="predictions CSV (with --sites)")
    s.set_defaults(func=cmd_impute)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        if args.coords:
            cfg = dataclasses.replace(cfg, coords=tuple(args.coords.split(",")))
        if args.command == "impute" and args.sites and not args.pred_out:
            raise ValueError("--sites needs --pred-out")
        _set_threads(args.threads)
        return args.func(args, cfg)
    except (ValueError, DataError, OSError) as e:
        print(f"gpkrig: error: {e}", file=sys.stderr)
        return 2


def _set_threads(n: int) -> None:
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


if __name__ == "__main__":
    sys.exit(main())
