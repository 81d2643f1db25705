"""Feature pipeline (constant-column removal, median imputation, z-scoring)
and runtime scaling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset
from .distributions import RtdParams, rescale_params

DEFAULT_CONSTANT_TOL = 1e-10


@dataclass(frozen=True)
class FeaturePipeline:
    n_raw: int
    kept_columns: tuple[int, ...]
    medians: tuple[float, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]

    @property
    def n_out(self) -> int:
        return len(self.kept_columns)

    def transform(self, X) -> np.ndarray:
        """Apply the fitted steps to raw features (1-D vector or 2-D matrix)."""
        Xa = np.asarray(X, dtype=float)
        if Xa.shape[-1] != self.n_raw:
            raise ValueError(f"expected {self.n_raw} raw features, got {Xa.shape[-1]}")
        Z = Xa[..., list(self.kept_columns)]
        Z = np.where(np.isnan(Z), np.asarray(self.medians), Z)
        return (Z - np.asarray(self.means)) / np.asarray(self.stds)

    def to_dict(self) -> dict:
        return {
            "n_raw": self.n_raw,
            "kept_columns": list(self.kept_columns),
            "medians": list(self.medians),
            "means": list(self.means),
            "stds": list(self.stds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturePipeline":
        return cls(
            int(d["n_raw"]),
            tuple(int(c) for c in d["kept_columns"]),
            tuple(float(v) for v in d["medians"]),
            tuple(float(v) for v in d["means"]),
            tuple(float(v) for v in d["stds"]),
        )


def fit_pipeline_matrix(
    X, constant_tol: float = DEFAULT_CONSTANT_TOL, *, allow_empty: bool = False
) -> FeaturePipeline:
    """``allow_empty`` returns a zero-column pipeline instead of raising when
    every column is (close to) constant."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a non-empty 2-D feature matrix")
    kept, medians, means, stds = [], [], [], []
    for j in range(X.shape[1]):
        col = X[:, j]
        known = col[~np.isnan(col)]
        # an all-missing column carries no information
        if known.size == 0 or known.std() <= constant_tol:
            continue
        med = float(np.median(known))
        filled = np.where(np.isnan(col), med, col)
        sd = float(filled.std())
        if sd <= 0:
            continue
        kept.append(j)
        medians.append(med)
        means.append(float(filled.mean()))
        stds.append(sd)
    if not kept and not allow_empty:
        raise ValueError("all feature columns are (close to) constant; no usable features")
    return FeaturePipeline(X.shape[1], tuple(kept), tuple(medians), tuple(means), tuple(stds))


def fit_pipeline(
    train: Dataset, constant_tol: float = DEFAULT_CONSTANT_TOL, *, allow_empty: bool = False
) -> FeaturePipeline:
    if len(train) == 0:
        raise ValueError("training set is empty")
    return fit_pipeline_matrix(train.feature_matrix(), constant_tol, allow_empty=allow_empty)


@dataclass(frozen=True)
class RuntimeScaler:
    max_runtime: float

    def scale(self, t):
        return np.asarray(t, dtype=float) / self.max_runtime if np.ndim(t) else float(t) / self.max_runtime

    def unscale_params(self, params: RtdParams) -> RtdParams:
        return rescale_params(params, self.max_runtime)

    def to_dict(self) -> dict:
        return {"max_runtime": self.max_runtime}

    @classmethod
    def from_dict(cls, d: dict) -> "RuntimeScaler":
        return cls(float(d["max_runtime"]))


def fit_scaler(train: Dataset) -> RuntimeScaler:
    if len(train) == 0:
        raise ValueError("training set is empty")
    return RuntimeScaler(float(max(inst.times.max() for inst in train)))


def scale(scaler: RuntimeScaler, t):
    return scaler.scale(t)


def unscale_params(scaler: RuntimeScaler, params: RtdParams) -> RtdParams:
    return scaler.unscale_params(params)


def transform(pipeline: FeaturePipeline, fv) -> np.ndarray:
    return pipeline.transform(fv)
