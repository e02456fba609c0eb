"""Gaussian process and kriging tools for large spatial assay data.

Exact GP maximum likelihood, variogram kriging, local approximate GPs,
scaled Vecchia approximations, imputation of censored responses and a
borehole-preserving evaluation harness.
"""

__version__ = "0.1.0"

from .core import Hyperparams, Kernel, kernel_matrix
from .data import (CensorSpec, Coding, Dataset, code_inputs, gen_synthetic_1d,
                   gen_synthetic_boreholes, load_assay_csv, load_meuse, write_assay_csv)
from .gp_exact import fit_mle, predict, profile_gradient, profile_loglik
from .lagp import LAGPConfig, lagp_predict_batch, slagp_predict_batch
from .vecchia import fit_svecchia, vecchia_loglik, vecchia_predict
from .censoring import mixture_moments, multiple_impute, sample_truncated_normal
from .evaluation import borehole_folds, log_loss_censored, rmse, run_cv, score_full, score_pointwise

__all__ = [
    "Hyperparams", "Kernel", "kernel_matrix", "CensorSpec", "Coding", "Dataset", "code_inputs",
    "gen_synthetic_1d", "gen_synthetic_boreholes", "load_assay_csv", "load_meuse",
    "write_assay_csv", "fit_mle", "predict", "profile_gradient", "profile_loglik", "LAGPConfig",
    "lagp_predict_batch", "slagp_predict_batch", "fit_svecchia", "vecchia_loglik",
    "vecchia_predict", "mixture_moments", "multiple_impute", "sample_truncated_normal",
    "borehole_folds", "log_loss_censored", "rmse", "run_cv", "score_full", "score_pointwise",
]
