"""Synthetic data generator and the three evaluation protocols.

* ``run_q1``: which RTD family describes the observed runtimes best.
* ``run_q2``: cross-validated comparison of the per-instance fitted gold
  standard, iRF, mRF and DistNet.
* ``run_q3``: the same models trained on only ``k`` observations per
  training instance.

Reports are plain dicts (JSON-ready). Every aggregate in a report is the
``np.mean`` of per-instance or per-run values stored next to it.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import distnet, forest
from .core import Dataset, Instance, derive_seed, split_folds, write_features, write_runtimes
from .distributions import Family, RtdParams, log_pdf, mle_fit, sample
from .metrics import rank_families

logger = logging.getLogger(__name__)

REPORT_FORMAT = "rtdnet.report/1"
MODELS = ("fitted", "irf", "mrf", "distnet")
Q3_MODELS = ("mrf", "distnet")
DEFAULT_K_GRID = (2, 4, 8, 16, 32, 64, 100)
GOLD_STANDARD_NOTE = (
    "fitted = per-instance maximum-likelihood fit on the instance's own observations; "
    "identical on train and test rows of the same instance"
)
FOREST_TARGET_NOTE = "forest targets fitted on runtimes divided by the training maximum"


# -- synthetic data ---------------------------------------------------------

LINK_KINDS = ("exp", "softplus", "constant")


@dataclass(frozen=True)
class Link:
    """``offset + scale * g(gain * u.x)`` with ``g`` the link kind and ``u`` a
    seeded unit-norm direction; ``constant`` ignores the features."""

    kind: str = "exp"
    gain: float = 1.0
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise ValueError(f"unknown link kind {self.kind!r}; choose from {LINK_KINDS}")
        if self.scale < 0 or self.offset < 0 or self.scale + self.offset <= 0:
            raise ValueError("link must produce positive values (scale, offset >= 0, not both 0)")

    def __call__(self, projection: np.ndarray) -> np.ndarray:
        u = self.gain * projection
        if self.kind == "exp":
            g = np.exp(u)
        elif self.kind == "softplus":
            g = np.logaddexp(0.0, u)
        else:
            g = np.ones_like(u)
        return self.offset + self.scale * g


DEFAULT_LINKS = {
    Family.LOG: (Link("exp", 0.5), Link("softplus", 1.0, 0.3, 0.2)),
    Family.EXP: (Link("exp", 0.5),),
    Family.N: (Link("exp", 0.5, 1.0, 1.0), Link("softplus", 1.0, 0.1, 0.05)),
    Family.INV: (Link("exp", 0.5), Link("softplus", 1.0, 3.0, 1.0)),
}


@dataclass(frozen=True)
class SynthSpec:
    family: Family = Family.LOG
    n_instances: int = 2000
    n_features: int = 10
    k_observations: int = 100
    links: tuple[Link, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        fam = Family.parse(self.family)
        object.__setattr__(self, "family", fam)
        links = DEFAULT_LINKS[fam] if self.links is None else tuple(
            lk if isinstance(lk, Link) else Link(**lk) for lk in self.links)
        object.__setattr__(self, "links", links)
        if len(links) != fam.n_params:
            raise ValueError(f"{fam} needs {fam.n_params} link functions, got {len(links)}")
        if self.n_instances < 1 or self.n_features < 1 or self.k_observations < 1:
            raise ValueError("n_instances, n_features and k_observations must be >= 1")

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "n_instances": self.n_instances,
            "n_features": self.n_features,
            "k_observations": self.k_observations,
            "links": [asdict(lk) for lk in self.links],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {"family", "n_instances", "n_features", "k_observations", "links", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SyntheticData:
    spec: SynthSpec
    dataset: Dataset
    truth: dict[str, RtdParams]
    directions: np.ndarray

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "features": out / "features.csv",
            "runtimes": out / "runtimes.csv",
            "truth": out / "truth.json",
        }
        write_features(self.dataset, paths["features"])
        write_runtimes(self.dataset, paths["runtimes"])
        paths["truth"].write_text(json.dumps({
            "spec": self.spec.to_dict(),
            "directions": self.directions.tolist(),
            "params": {i: p.to_dict() for i, p in self.truth.items()},
        }, indent=1) + "\n")
        return paths


def generate_synthetic(spec: SynthSpec) -> SyntheticData:
    """Draw features, ground-truth parameters and runtimes for ``spec``."""
    fam = spec.family
    m = spec.n_features
    dir_rng = np.random.default_rng(derive_seed(spec.seed, "synth", 0))
    directions = dir_rng.standard_normal((fam.n_params, m))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    X = np.random.default_rng(derive_seed(spec.seed, "synth", 1)).standard_normal((spec.n_instances, m))
    theta = np.column_stack([link(X @ u) for link, u in zip(spec.links, directions)])
    time_rng = np.random.default_rng(derive_seed(spec.seed, "synth", 2))
    width = len(str(spec.n_instances - 1))
    instances, truth = [], {}
    for i in range(spec.n_instances):
        iid = f"inst{i:0{width}d}"
        params = RtdParams(fam, tuple(float(v) for v in theta[i]))
        times = sample(params, spec.k_observations, time_rng)
        instances.append(Instance(iid, X[i], times))
        truth[iid] = params
    dataset = Dataset(tuple(instances), tuple(f"f{j}" for j in range(m)))
    return SyntheticData(spec, dataset, truth, directions)


# -- evaluation helpers -----------------------------------------------------

def _normalized(params: RtdParams, times: np.ndarray) -> float:
    return float(-np.sum(log_pdf(params, times)) / times.size - math.log(times.max()))


def evaluate(predictions: Sequence[RtdParams], dataset: Dataset) -> list[float]:
    """Per-instance normalised NLLH of ``predictions`` (dataset order, seconds)."""
    return [_normalized(p, inst.times) for p, inst in zip(predictions, dataset)]


def gold_standard(dataset: Dataset, family) -> list[float]:
    fam = Family.parse(family)
    out = []
    for inst in dataset:
        try:
            out.append(_normalized(mle_fit(fam, inst.times), inst.times))
        except ValueError:
            out.append(math.nan)
    return out


def _mean(values) -> float:
    return float(np.mean(np.asarray(values, dtype=float)))


def _std(values) -> float:
    return float(np.std(np.asarray(values, dtype=float)))


@dataclass(frozen=True)
class ModelSettings:
    net: distnet.NetworkConfig = distnet.NetworkConfig()
    train: distnet.TrainConfig = distnet.TrainConfig(max_epochs=200)
    forest: forest.ForestParams = forest.ForestParams()

    def to_dict(self) -> dict:
        return {"net": asdict(self.net), "train": asdict(self.train), "forest": asdict(self.forest)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSettings":
        return cls(
            distnet.NetworkConfig(**d.get("net", {})),
            distnet.TrainConfig(**{"max_epochs": 200, **d.get("train", {})}),
            forest.ForestParams(**d.get("forest", {})),
        )


def _fit_model(name: str, train: Dataset, family: Family, settings: ModelSettings,
               seed: int, fold: int):
    """Train ``name`` on ``train``; returns (predict_fn, info)."""
    if name == "distnet":
        cfg = replace(settings.train,
                      init_seed=derive_seed(seed, "init", fold),
                      shuffle_seed=derive_seed(seed, "shuffle", fold))
        model = distnet.train(train, family, settings.net, cfg)
        info = {"epochs": model.training_log["epochs"],
                "stop_reason": model.training_log["stop_reason"],
                "final_train_loss": model.training_log["train_loss"][-1]}
        return model.predict, info
    if name in forest.VARIANTS:
        params = replace(settings.forest, seed=derive_seed(seed, "forest", fold))
        model = forest.train_forest(train, family, name, params,
                                    constant_tol=settings.train.constant_tol)
        return model.predict, {"excluded": [list(e) for e in model.excluded]}
    raise ValueError(f"unknown model {name!r}; choose from {MODELS}")


def _evaluate_model(predict_fn, dataset: Dataset) -> list[float]:
    preds = predict_fn(dataset.feature_matrix())
    return evaluate(preds, dataset)


def _run_pool(fn: Callable, jobs: Sequence[tuple], n_workers: int) -> list:
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs))) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def _envelope(question: int, family, seed: int, deterministic: bool, config: dict | None) -> dict:
    return {
        "format": REPORT_FORMAT,
        "question": question,
        "family": None if family is None else Family.parse(family).value,
        "seed": seed,
        "deterministic": deterministic,
        "config": config or {},
    }


# -- Q1 ---------------------------------------------------------------------

def run_q1(dataset: Dataset, families: Iterable = tuple(Family), *, alpha: float = 0.01,
           seed: int = 0, deterministic: bool = False, config: dict | None = None) -> dict:
    """Rank RTD families by mean normalised NLLH of per-instance fits."""
    started = time.monotonic()
    ranks = rank_families(dataset, families, alpha)
    report = _envelope(1, None, seed, deterministic, config)
    report.update({
        "alpha": alpha,
        "families": [r.family.value for r in ranks],
        "ranking": [r.summary() for r in ranks],
        "per_instance": {r.family.value: r.per_instance for r in ranks},
        "failed": {r.family.value: r.failed_ids for r in ranks},
    })
    if not deterministic:
        report["wall_seconds"] = time.monotonic() - started
    return report


# -- Q2 ---------------------------------------------------------------------

def _q2_fold(dataset: Dataset, family: Family, fold: int, train_ids, test_ids,
             models: Sequence[str], settings: ModelSettings, seed: int, deterministic: bool) -> dict:
    train = dataset.subset(train_ids)
    test = dataset.subset(test_ids)
    if set(train.ids) & set(test.ids):
        raise AssertionError(f"fold {fold}: training and test instances overlap")
    out = {"fold": fold, "train_ids": train.ids, "test_ids": test.ids, "models": {}}
    for name in models:
        started = time.monotonic()
        rec: dict = {"error": None}
        try:
            if name == "fitted":
                rec["train"] = gold_standard(train, family)
                rec["test"] = gold_standard(test, family)
            else:
                predict_fn, info = _fit_model(name, train, family, settings, seed, fold)
                rec["trained_on"] = len(train)
                rec.update(info)
                rec["train"] = _evaluate_model(predict_fn, train)
                rec["test"] = _evaluate_model(predict_fn, test)
            rec["train_mean"] = _mean(rec["train"])
            rec["test_mean"] = _mean(rec["test"])
        except Exception as exc:  # per-model failures are isolated
            logger.exception("fold %d model %s failed", fold, name)
            rec = {"error": f"{type(exc).__name__}: {exc}"}
        if not deterministic:
            rec["wall_seconds"] = time.monotonic() - started
        out["models"][name] = rec
    return out


def run_q2(dataset: Dataset, family, *, folds: int = 10, models: Sequence[str] = MODELS,
           settings: ModelSettings = ModelSettings(), seed: int = 0, deterministic: bool = False,
           jobs: int = 1, config: dict | None = None) -> dict:
    """Cross-validated train/test normalised NLLH per model."""
    fam = Family.parse(family)
    for name in models:
        if name not in MODELS:
            raise ValueError(f"unknown model {name!r}; choose from {MODELS}")
    if deterministic:
        settings = replace(settings, train=replace(settings.train, deterministic=True))
    started = time.monotonic()
    assignment = split_folds(dataset, folds, derive_seed(seed, "fold-split"))
    job_args = [
        (dataset, fam, f, assignment.train_ids(f), assignment.test_ids(f), tuple(models),
         settings, seed, deterministic)
        for f in range(folds)
    ]
    fold_reports = _run_pool(_q2_fold, job_args, jobs)
    summary = {}
    for name in models:
        ok = [fr["models"][name] for fr in fold_reports if fr["models"][name]["error"] is None]
        summary[name] = {
            "train": _mean([r["train_mean"] for r in ok]) if ok else None,
            "test": _mean([r["test_mean"] for r in ok]) if ok else None,
            "n_folds": len(ok),
        }
    report = _envelope(2, fam, seed, deterministic, config)
    report.update({
        "folds": folds,
        "fold_seed": assignment.seed,
        "models": list(models),
        "settings": settings.to_dict(),
        "notes": [GOLD_STANDARD_NOTE, FOREST_TARGET_NOTE],
        "summary": summary,
        "per_fold": fold_reports,
    })
    if not deterministic:
        report["wall_seconds"] = time.monotonic() - started
    return report


# -- Q3 ---------------------------------------------------------------------

def subsample_times(dataset: Dataset, k: int, seed: int) -> Dataset:
    """Keep ``k`` observations per instance, drawn without replacement.

    Kept indices are sorted, so ``k`` equal to an instance's count returns its
    observations unchanged.
    """
    rng = np.random.default_rng(seed)
    chosen = {}
    for inst in dataset:
        if k > inst.k:
            raise ValueError(f"instance {inst.id} has {inst.k} observations, cannot subsample {k}")
        idx = np.sort(rng.choice(inst.k, size=k, replace=False))
        chosen[inst.id] = inst.times[idx]
    return dataset.with_times(chosen)


def _q3_job(dataset: Dataset, family: Family, fold: int, train_ids, test_ids, k: int, rep: int,
            models: Sequence[str], settings: ModelSettings, seed: int) -> dict:
    train_full = dataset.subset(train_ids)
    test = dataset.subset(test_ids)
    if set(train_full.ids) & set(test.ids):
        raise AssertionError(f"fold {fold}: training and test instances overlap")
    train = subsample_times(train_full, k, derive_seed(seed, "subsample", fold, k, rep))
    out = {"fold": fold, "k": k, "repetition": rep, "models": {}}
    for name in models:
        try:
            predict_fn, _ = _fit_model(name, train, family, settings, seed, fold)
            vals = _evaluate_model(predict_fn, test)
            out["models"][name] = {"test": vals, "test_mean": _mean(vals), "error": None}
        except Exception as exc:
            logger.exception("q3 fold %d k=%d rep %d model %s failed", fold, k, rep, name)
            out["models"][name] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


def run_q3(dataset: Dataset, family, *, k_grid: Sequence[int] = DEFAULT_K_GRID,
           repetitions: int = 10, folds: int = 10, models: Sequence[str] = Q3_MODELS,
           settings: ModelSettings = ModelSettings(), seed: int = 0,
           deterministic: bool = False, jobs: int = 1, config: dict | None = None) -> dict:
    """Learning curves over the number of observations per training instance."""
    fam = Family.parse(family)
    for name in models:
        if name not in MODELS or name == "fitted":
            raise ValueError(f"model {name!r} cannot be retrained in a learning curve")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    k_min = min(inst.k for inst in dataset)
    k_full = max(inst.k for inst in dataset)
    bad = [k for k in k_grid if k < 1 or k > k_min]
    if bad:
        raise ValueError(f"k values {bad} exceed the available observations (min {k_min})")
    if deterministic:
        settings = replace(settings, train=replace(settings.train, deterministic=True))
    started = time.monotonic()
    assignment = split_folds(dataset, folds, derive_seed(seed, "fold-split"))

    # with every instance kept whole the draw is the identity and training
    # seeds depend only on the fold: run repetition 0 once and reuse it
    job_args, reuse = [], []
    for f in range(folds):
        for k in k_grid:
            for rep in range(repetitions):
                if k == k_full == k_min and rep > 0:
                    reuse.append((f, k, rep))
                    continue
                job_args.append((dataset, fam, f, assignment.train_ids(f), assignment.test_ids(f),
                                 k, rep, tuple(models), settings, seed))
    results = {(r["fold"], r["k"], r["repetition"]): r for r in _run_pool(_q3_job, job_args, jobs)}
    for f, k, rep in reuse:
        results[(f, k, rep)] = {**results[(f, k, 0)], "repetition": rep, "reused_from": 0}
    runs = [results[key] for key in sorted(results)]

    gold = {}
    for f in range(folds):
        gold[f] = _mean(gold_standard(dataset.subset(assignment.test_ids(f)), fam))
    curves = []
    for name in models:
        for k in k_grid:
            vals = [r["models"][name]["test_mean"] for r in runs
                    if r["k"] == k and r["models"][name]["error"] is None]
            curves.append({
                "model": name,
                "k": k,
                "mean": _mean(vals) if vals else None,
                "std": _std(vals) if vals else None,
                "n": len(vals),
            })
    report = _envelope(3, fam, seed, deterministic, config)
    report.update({
        "folds": folds,
        "fold_seed": assignment.seed,
        "k_grid": list(k_grid),
        "repetitions": repetitions,
        "models": list(models),
        "settings": settings.to_dict(),
        "notes": [GOLD_STANDARD_NOTE, FOREST_TARGET_NOTE,
                  "std is the population standard deviation over folds x repetitions"],
        "gold_standard": {"per_fold": [gold[f] for f in range(folds)],
                          "mean": _mean([gold[f] for f in range(folds)])},
        "curves": curves,
        "runs": runs,
    })
    if not deterministic:
        report["wall_seconds"] = time.monotonic() - started
    return report


# -- report files -----------------------------------------------------------

def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_report(report: dict, out_dir) -> dict[str, Path]:
    """Write ``report.json`` plus the question's CSV table(s)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json"}
    paths["report"].write_text(json.dumps(report, indent=1) + "\n")
    q = report["question"]
    if q == 1:
        paths["table"] = out / "table_families.csv"
        with paths["table"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "family", "normalized_nllh", "ks_rejection_pct", "n_instances", "n_failed"])
            for pos, r in enumerate(report["ranking"], start=1):
                w.writerow([pos, r["family"], _fmt(r["normalized_nllh"]),
                            _fmt(r["ks_rejection_pct"]), r["n_instances"], r["n_failed"]])
    elif q == 2:
        paths["table"] = out / "table_models.csv"
        with paths["table"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["family", "model", "split", "normalized_nllh", "n_folds"])
            for name, s in report["summary"].items():
                for split in ("train", "test"):
                    w.writerow([report["family"], name, split, _fmt(s[split]), s["n_folds"]])
    elif q == 3:
        paths["curve"] = out / "learning_curve.csv"
        with paths["curve"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["family", "model", "k", "mean", "std", "n"])
            for c in report["curves"]:
                w.writerow([report["family"], c["model"], c["k"], _fmt(c["mean"]), _fmt(c["std"]), c["n"]])
            w.writerow([report["family"], "fitted", "", _fmt(report["gold_standard"]["mean"]), "",
                        len(report["gold_standard"]["per_fold"])])
    return paths

