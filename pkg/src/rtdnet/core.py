"""Dataset model, CSV ingestion and instance-level fold splitting."""
from __future__ import annotations

import csv
import json
import logging
import math
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"", "nan", "NaN", "NAN"})


class DataError(ValueError):
    """Base class for problems with input data."""


class ParseError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class ValidationError(DataError):
    pass


class EmptyJoinError(DataError):
    pass


@dataclass(frozen=True)
class Instance:
    """One problem instance: raw features (NaN marks missing) and its runtimes."""

    id: str
    features: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        if not self.id:
            raise ValidationError("instance id must be non-empty")
        feats = np.asarray(self.features, dtype=float)
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise ValidationError(f"{self.id}: need at least one runtime observation")
        if not np.all(np.isfinite(times)) or np.any(times <= 0):
            raise ValidationError(f"{self.id}: runtimes must be positive and finite")
        feats.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "times", times)

    @property
    def k(self) -> int:
        return int(self.times.size)


@dataclass(frozen=True)
class Dataset:
    instances: tuple[Instance, ...]
    feature_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        m = len(self.feature_names)
        seen = set()
        for inst in self.instances:
            if inst.features.shape != (m,):
                raise ValidationError(
                    f"{inst.id}: expected {m} features, got {inst.features.shape[0]}"
                )
            if inst.id in seen:
                raise DuplicateIdError(f"duplicate instance id {inst.id!r}")
            seen.add(inst.id)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    @property
    def ids(self) -> list[str]:
        return [inst.id for inst in self.instances]

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def feature_matrix(self) -> np.ndarray:
        if not self.instances:
            return np.empty((0, self.n_features))
        return np.vstack([inst.features for inst in self.instances])

    def subset(self, ids: Iterable[str]) -> "Dataset":
        wanted = set(ids)
        return Dataset(
            tuple(inst for inst in self.instances if inst.id in wanted),
            self.feature_names,
        )

    def with_times(self, times: Mapping[str, np.ndarray]) -> "Dataset":
        """Copy of the dataset with replaced observation lists (same instances)."""
        return Dataset(
            tuple(Instance(i.id, i.features, times[i.id]) for i in self.instances),
            self.feature_names,
        )

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.feature_names != other.feature_names or len(self) != len(other):
            return False
        for a, b in zip(self.instances, other.instances):
            if a.id != b.id:
                return False
            if not np.array_equal(a.features, b.features, equal_nan=True):
                return False
            if not np.array_equal(a.times, b.times):
                return False
        return True

    __hash__ = None


@dataclass(frozen=True)
class JoinReport:
    features_only: tuple[str, ...] = ()
    runtimes_only: tuple[str, ...] = ()

    @property
    def n_dropped(self) -> int:
        return len(self.features_only) + len(self.runtimes_only)

    def to_dict(self) -> dict:
        return {
            "dropped": self.n_dropped,
            "features_only": list(self.features_only),
            "runtimes_only": list(self.runtimes_only),
        }


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: Mapping[str, int]
    n_folds: int
    seed: int = 0
    order: tuple[str, ...] = field(default=(), repr=False)

    def test_ids(self, fold: int) -> list[str]:
        return [i for i in self.order if self.fold_of[i] == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i in self.order if self.fold_of[i] != fold]

    def sizes(self) -> list[int]:
        counts = [0] * self.n_folds
        for f in self.fold_of.values():
            counts[f] += 1
        return counts


def _parse_float(cell: str, row: int, column: str, path) -> float:
    if cell.strip() in MISSING_TOKENS:
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise ParseError(
            f"{path}: row {row}, column {column!r}: non-numeric value {cell!r}"
        ) from None


def load_features(path) -> tuple[list[str], dict[str, np.ndarray]]:
    """Read ``instance,<f1>,...,<fm>``. Empty cells and ``NaN`` become NaN."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        if not header or header[0].strip() != "instance":
            raise ParseError(f"{path}: first header column must be 'instance'")
        names = [h.strip() for h in header[1:]]
        features: dict[str, np.ndarray] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {lineno}: expected {len(header)} cells, got {len(row)}"
                )
            iid = row[0].strip()
            if not iid:
                raise ParseError(f"{path}: row {lineno}: empty instance id")
            if iid in features:
                raise DuplicateIdError(f"{path}: row {lineno}: duplicate instance id {iid!r}")
            features[iid] = np.array(
                [_parse_float(c, lineno, n, path) for c, n in zip(row[1:], names)]
            )
    return names, features


def load_runtimes(path) -> dict[str, np.ndarray]:
    """Read ``instance,seed,runtime`` rows grouped per instance in file order."""
    path = Path(path)
    grouped: dict[str, list[float]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        if header != ["instance", "seed", "runtime"]:
            raise ParseError(f"{path}: header must be 'instance,seed,runtime', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{path}: row {lineno}: expected 3 cells, got {len(row)}")
            iid = row[0].strip()
            if not iid:
                raise ParseError(f"{path}: row {lineno}: empty instance id")
            try:
                t = float(row[2])
            except ValueError:
                raise ParseError(
                    f"{path}: row {lineno}, column 'runtime': non-numeric value {row[2]!r}"
                ) from None
            if not math.isfinite(t) or t <= 0:
                raise ValidationError(
                    f"{path}: row {lineno}: runtime must be positive and finite, got {row[2]!r}"
                )
            grouped.setdefault(iid, []).append(t)
    return {k: np.array(v) for k, v in grouped.items()}


def join_dataset(
    feature_names: Sequence[str],
    features: Mapping[str, np.ndarray],
    runtimes: Mapping[str, np.ndarray],
    *,
    report_stream=None,
) -> tuple[Dataset, JoinReport]:
    """Inner join on instance id. Unmatched ids are dropped and reported."""
    common = [i for i in features if i in runtimes]
    report = JoinReport(
        features_only=tuple(i for i in features if i not in runtimes),
        runtimes_only=tuple(i for i in runtimes if i not in features),
    )
    if not common:
        raise EmptyJoinError("features and runtimes share no instance ids")
    if report.n_dropped:
        stream = sys.stderr if report_stream is None else report_stream
        print(json.dumps({"event": "dropped_instances", **report.to_dict()}), file=stream)
        logger.warning("dropped %d instances without both features and runtimes", report.n_dropped)
    ds = Dataset(
        tuple(Instance(i, features[i], runtimes[i]) for i in common),
        tuple(feature_names),
    )
    return ds, report


def load_dataset(features_path, runtimes_path, **kw) -> tuple[Dataset, JoinReport]:
    names, feats = load_features(features_path)
    return join_dataset(names, feats, load_runtimes(runtimes_path), **kw)


def write_features(dataset: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", *dataset.feature_names])
        for inst in dataset:
            w.writerow([inst.id, *("" if math.isnan(v) else repr(float(v)) for v in inst.features)])


def write_runtimes(dataset: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "seed", "runtime"])
        for inst in dataset:
            for seed, t in enumerate(inst.times):
                w.writerow([inst.id, seed, repr(float(t))])


def split_folds(dataset: Dataset, n_folds: int, seed: int) -> FoldAssignment:
    """Shuffle instance ids with ``seed`` and deal them round-robin into folds."""
    n = len(dataset)
    if not 2 <= n_folds <= n:
        raise ValueError(f"number of folds must be in [2, {n}], got {n_folds}")
    ids = dataset.ids
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = {ids[j]: pos % n_folds for pos, j in enumerate(perm)}
    return FoldAssignment(fold_of, n_folds, seed, tuple(ids))


def derive_seed(root: int, stream: str, *index: int) -> int:
    """Independent 32-bit seed for the named substream ``stream`` of ``root``.

    Streams are keyed by name (e.g. ``"fold-split"``, ``"init"``) plus optional
    integer indices, so re-seeding one component leaves the others untouched.
    """
    key = (zlib.crc32(stream.encode()), *(int(i) for i in index))
    return int(np.random.SeedSequence(int(root), spawn_key=key).generate_state(1)[0])
