"""Runtime-distribution fitting and prediction.

Fits parametric runtime distributions (N, LOG, EXP, INV) to per-instance
solver runtimes and learns a mapping from instance features to distribution
parameters (DistNet, with random-forest baselines).
"""
from .core import Dataset, Instance, load_dataset, split_folds
from .distributions import Family, RtdParams, cdf, log_pdf, mle_fit, pdf, ppf, sample

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Family",
    "Instance",
    "RtdParams",
    "cdf",
    "load_dataset",
    "log_pdf",
    "mle_fit",
    "pdf",
    "ppf",
    "sample",
    "split_folds",
]
