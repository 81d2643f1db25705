"""Random-forest baselines on per-instance fitted RTD parameters.

``irf`` trains one single-output forest per distribution parameter; ``mrf``
trains one multi-output forest whose split criterion is the variance
reduction summed over all parameters.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .core import Dataset
from .distributions import Family, RtdParams, mle_fit
from .preprocessing import (
    DEFAULT_CONSTANT_TOL,
    FeaturePipeline,
    RuntimeScaler,
    fit_pipeline,
    fit_scaler,
)

logger = logging.getLogger(__name__)

MODEL_FORMAT = "rtdnet.forest/1"
VARIANTS = ("irf", "mrf")
POSITIVE_FLOOR = 1e-10


@njit(cache=True)
def _node_sse(Y, rows, start, end):
    n = end - start
    total = 0.0
    for o in range(Y.shape[1]):
        s = 0.0
        s2 = 0.0
        for q in range(start, end):
            v = Y[rows[q], o]
            s += v
            s2 += v * v
        total += s2 - s * s / n
    return total


@njit(cache=True)
def _is_pure(Y, rows, start, end):
    r0 = rows[start]
    for q in range(start + 1, end):
        for o in range(Y.shape[1]):
            if Y[rows[q], o] != Y[r0, o]:
                return False
    return True


@njit(cache=True)
def _build_tree(X, Y, rows, max_features, min_leaf, seed):
    """Grow one CART regression tree on ``rows`` (indices into X/Y, with
    repetitions for bootstrap samples). Returns flat node arrays."""
    np.random.seed(seed)
    n = rows.shape[0]
    m = X.shape[1]
    p = Y.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros((cap, p))
    n_samples = np.zeros(cap, dtype=np.int64)

    rows = rows.copy()
    stack_node = np.empty(cap, dtype=np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    top = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n
    top = 1
    n_nodes = 1
    feats = np.arange(m)
    xs = np.empty(n)
    order = np.empty(n, dtype=np.int64)
    SL = np.empty(p)
    ST = np.empty(p)

    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        cnt = end - start
        n_samples[node] = cnt

        pure = _is_pure(Y, rows, start, end)
        if pure:
            for o in range(p):
                value[node, o] = Y[rows[start], o]
        else:
            for o in range(p):
                s = 0.0
                for q in range(start, end):
                    s += Y[rows[q], o]
                value[node, o] = s / cnt
        if pure or cnt < 2 * min_leaf:
            continue

        for o in range(p):
            s = 0.0
            for q in range(start, end):
                s += Y[rows[q], o]
            ST[o] = s
        # split quality proxy: sum_o SL^2/nl + SR^2/nr (maximising it minimises SSE)
        best_score = -np.inf
        best_f = -1
        best_thr = 0.0
        n_visited = 0
        n_drawn = 0
        while n_drawn < m and n_visited < max_features:
            # partial Fisher-Yates over the feature indices
            jj = n_drawn + np.random.randint(0, m - n_drawn)
            f = feats[jj]
            feats[jj] = feats[n_drawn]
            feats[n_drawn] = f
            n_drawn += 1
            for q in range(cnt):
                xs[q] = X[rows[start + q], f]
            order[:cnt] = np.argsort(xs[:cnt], kind="mergesort")
            if xs[order[cnt - 1]] <= xs[order[0]]:
                continue  # constant in this node; does not count towards max_features
            n_visited += 1
            for o in range(p):
                SL[o] = 0.0
            for i in range(1, cnt):
                r = rows[start + order[i - 1]]
                for o in range(p):
                    SL[o] += Y[r, o]
                if i < min_leaf or cnt - i < min_leaf:
                    continue
                lo = xs[order[i - 1]]
                hi = xs[order[i]]
                if not lo < hi:
                    continue
                score = 0.0
                for o in range(p):
                    sr = ST[o] - SL[o]
                    score += SL[o] * SL[o] / i + sr * sr / (cnt - i)
                if score > best_score:
                    best_score = score
                    best_f = f
                    mid = 0.5 * (lo + hi)
                    best_thr = mid if mid < hi else lo
        if best_f < 0:
            continue

        # partition rows[start:end] in place: x <= thr goes left
        lo_i = start
        hi_i = end - 1
        while lo_i <= hi_i:
            if X[rows[lo_i], best_f] <= best_thr:
                lo_i += 1
            else:
                tmp = rows[lo_i]
                rows[lo_i] = rows[hi_i]
                rows[hi_i] = tmp
                hi_i -= 1
        mid_i = lo_i
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        # push right first so the left subtree is grown first (depth-first ids)
        stack_node[top] = n_nodes + 1
        stack_start[top] = mid_i
        stack_end[top] = end
        top += 1
        stack_node[top] = n_nodes
        stack_start[top] = start
        stack_end[top] = mid_i
        top += 1
        n_nodes += 2

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), n_samples[:n_nodes].copy())


@njit(cache=True)
def _apply_tree(feature, threshold, left, right, value, X):
    out = np.empty((X.shape[0], value.shape[1]))
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        for o in range(value.shape[1]):
            out[i, o] = value[node, o]
    return out


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        return _apply_tree(self.feature, self.threshold, self.left, self.right, self.value, X)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64).reshape(len(d["feature"]), -1),
            np.asarray(d["n_samples"], dtype=np.int64),
        )


def build_tree(X, Y, *, max_features: int | None = None, min_samples_leaf: int = 1,
               rows=None, seed: int = 0) -> Tree:
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y have different row counts")
    rows = np.arange(X.shape[0], dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64)
    mf = X.shape[1] if max_features is None else int(max_features)
    return Tree(*_build_tree(X, Y, rows, mf, int(min_samples_leaf), int(seed)))


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_features: int | None = None
    min_samples_leaf: int = 1
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be >= 1")

    def resolved_max_features(self, m: int) -> int:
        mf = math.ceil(m / 3) if self.max_features is None else self.max_features
        return max(1, min(m, int(mf)))


def _fit_ensemble(X, Y, params: ForestParams, seed_seq: np.random.SeedSequence) -> list[Tree]:
    n, m = X.shape
    mf = params.resolved_max_features(m)
    trees = []
    for child in seed_seq.spawn(params.n_trees):
        rng = np.random.default_rng(child)
        rows = rng.integers(0, n, n) if params.bootstrap else np.arange(n)
        tree_seed = int(child.generate_state(1)[0])
        trees.append(build_tree(X, Y, max_features=mf, min_samples_leaf=params.min_samples_leaf,
                                rows=rows, seed=tree_seed))
    return trees


def _ensemble_mean(trees: list[Tree], X) -> np.ndarray:
    return np.mean([t.predict(X) for t in trees], axis=0)


@dataclass(frozen=True)
class TrainingTargets:
    ids: tuple[str, ...]
    X: np.ndarray
    Y: np.ndarray
    excluded: tuple[tuple[str, str], ...] = ()


def build_training_targets(train: Dataset, family, pipeline: FeaturePipeline,
                           scaler: RuntimeScaler) -> TrainingTargets:
    """Preprocessed features and scaled-time MLE parameters per instance.

    Instances whose fit fails (e.g. too few observations) are excluded and
    listed in ``excluded``.
    """
    fam = Family.parse(family)
    ids, rows, targets, excluded = [], [], [], []
    for inst in train:
        try:
            params = mle_fit(fam, np.asarray(inst.times) / scaler.max_runtime)
        except ValueError as exc:
            excluded.append((inst.id, str(exc)))
            continue
        ids.append(inst.id)
        rows.append(inst.features)
        targets.append(params.theta)
    if excluded:
        logger.warning("excluded %d instances from forest targets", len(excluded))
    X = pipeline.transform(np.vstack(rows)) if rows else np.empty((0, pipeline.n_out))
    Y = np.asarray(targets, dtype=float).reshape(len(ids), fam.n_params)
    return TrainingTargets(tuple(ids), X, Y, tuple(excluded))


@dataclass(frozen=True)
class ForestModel:
    variant: str
    family: Family
    params: ForestParams
    forests: tuple[tuple[Tree, ...], ...]
    pipeline: FeaturePipeline | None = None
    scaler: RuntimeScaler | None = None
    excluded: tuple[tuple[str, str], ...] = ()
    target_space: str = "scaled-time"

    def predict_scaled(self, X_pre) -> np.ndarray:
        """Clamped parameter matrix in scaled-time space."""
        X_pre = np.atleast_2d(np.asarray(X_pre, dtype=float))
        if self.variant == "mrf":
            out = _ensemble_mean(list(self.forests[0]), X_pre)
        else:
            out = np.hstack([_ensemble_mean(list(f), X_pre) for f in self.forests])
        return np.maximum(out, POSITIVE_FLOOR)

    def predict(self, raw_fv):
        if self.pipeline is None or self.scaler is None:
            raise ValueError("model has no attached preprocessing")
        raw = np.asarray(raw_fv, dtype=float)
        theta = self.predict_scaled(self.pipeline.transform(raw))
        params = [self.scaler.unscale_params(RtdParams(self.family, tuple(r))) for r in theta]
        return params[0] if raw.ndim == 1 else params

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "model": self.variant,
            "family": self.family.value,
            "params": asdict(self.params),
            "target_space": self.target_space,
            "forests": [[t.to_dict() for t in f] for f in self.forests],
            "pipeline": None if self.pipeline is None else self.pipeline.to_dict(),
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
            "excluded": [list(e) for e in self.excluded],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a forest model document (format={d.get('format')!r})")
        return cls(
            d["model"],
            Family.parse(d["family"]),
            ForestParams(**d["params"]),
            tuple(tuple(Tree.from_dict(t) for t in f) for f in d["forests"]),
            None if d.get("pipeline") is None else FeaturePipeline.from_dict(d["pipeline"]),
            None if d.get("scaler") is None else RuntimeScaler.from_dict(d["scaler"]),
            tuple(tuple(e) for e in d.get("excluded", [])),
            d.get("target_space", "scaled-time"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "ForestModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_forest(X, Y, variant: str, params: ForestParams = ForestParams()) -> tuple[tuple[Tree, ...], ...]:
    """Fit the tree ensembles for ``variant`` on (preprocessed X, targets Y)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown forest variant {variant!r}; choose from {VARIANTS}")
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    if X.shape[0] < 2:
        raise ValueError("a forest needs at least 2 training rows")
    root = np.random.SeedSequence(params.seed)
    if variant == "mrf":
        return (tuple(_fit_ensemble(X, Y, params, root)),)
    return tuple(
        tuple(_fit_ensemble(X, np.ascontiguousarray(Y[:, [o]]), params, child))
        for o, child in enumerate(root.spawn(Y.shape[1]))
    )


def train_forest(train: Dataset, family, variant: str, params: ForestParams = ForestParams(),
                 *, constant_tol: float = DEFAULT_CONSTANT_TOL) -> ForestModel:
    """Fit preprocessing, per-instance targets and the forest(s)."""
    fam = Family.parse(family)
    pipeline = fit_pipeline(train, constant_tol)
    scaler = fit_scaler(train)
    targets = build_training_targets(train, fam, pipeline, scaler)
    forests = fit_forest(targets.X, targets.Y, variant, params)
    return ForestModel(variant, fam, params, forests, pipeline, scaler, targets.excluded)


def predict_forest(model: ForestModel, raw_fv):
    return model.predict(raw_fv)
