import json
import math

import numpy as np
import pytest

from rtdnet.core import Dataset
from rtdnet.distributions import Family, RtdParams, mle_fit
from rtdnet.metrics import normalized_nllh
from rtdnet.preprocessing import (
    DEFAULT_CONSTANT_TOL,
    FeaturePipeline,
    RuntimeScaler,
    fit_pipeline,
    fit_pipeline_matrix,
    fit_scaler,
    scale,
    transform,
    unscale_params,
)

from conftest import make_dataset


def test_constant_column_dropped():
    X = np.array([[3.0, 1.0], [3.0, 2.0], [3.0, 3.0]])
    pipe = fit_pipeline_matrix(X, constant_tol=1e-12)
    assert pipe.kept_columns == (1,)


def test_near_constant_column_uses_tolerance():
    X = np.array([[1.0, 1.0], [1.0 + 1e-12, 2.0], [1.0, 3.0]])
    assert fit_pipeline_matrix(X).kept_columns == (1,)
    assert fit_pipeline_matrix(X, constant_tol=0.0).kept_columns == (0, 1)
    assert DEFAULT_CONSTANT_TOL == 1e-10


def test_median_imputation():
    X = np.array([[1.0], [2.0], [np.nan], [3.0]])
    pipe = fit_pipeline_matrix(X)
    assert pipe.medians == (2.0,)
    assert pipe.means == (2.0,)
    assert pipe.stds[0] == pytest.approx(np.std([1, 2, 2, 3]))


def test_zscores_population_std():
    pipe = fit_pipeline_matrix(np.array([[1.0], [2.0], [3.0]]))
    z = pipe.transform(np.array([[1.0], [2.0], [3.0]]))[:, 0]
    assert z == pytest.approx([-1.224744871391589, 0.0, 1.224744871391589], abs=1e-12)


def test_all_constant_is_error():
    with pytest.raises(ValueError, match="no usable features"):
        fit_pipeline_matrix(np.ones((4, 3)))


def test_empty_training_set():
    with pytest.raises(ValueError):
        fit_pipeline(Dataset((), ("a",)))
    with pytest.raises(ValueError):
        fit_scaler(Dataset((), ("a",)))


def test_transform_row_matches_batch():
    ds = make_dataset(n=12, m=4)
    pipe = fit_pipeline(ds)
    batch = pipe.transform(ds.feature_matrix())
    for i, inst in enumerate(ds):
        assert np.array_equal(transform(pipe, inst.features), batch[i])


def test_transform_all_missing_vector():
    pipe = fit_pipeline_matrix(np.array([[1.0, 10.0], [2.0, 20.0], [4.0, 30.0]]))
    out = pipe.transform([np.nan, np.nan])
    expected = (np.asarray(pipe.medians) - np.asarray(pipe.means)) / np.asarray(pipe.stds)
    assert np.array_equal(out, expected)


def test_transform_no_clipping():
    pipe = FeaturePipeline(1, (0,), (2.0,), (2.0,), (1.0,))
    assert pipe.transform([10.0])[0] == 8.0


def test_transform_length_mismatch():
    pipe = FeaturePipeline(2, (0,), (0.0,), (0.0,), (1.0,))
    with pytest.raises(ValueError):
        pipe.transform([1.0])


def test_fitted_columns_standardized():
    rng = np.random.default_rng(3)
    X = rng.normal(5, 3, size=(50, 6))
    X[rng.random(X.shape) < 0.1] = np.nan
    X[:, 2] = 7.0
    pipe = fit_pipeline_matrix(X)
    Z = pipe.transform(X)
    assert 2 not in pipe.kept_columns
    assert np.all(np.abs(Z.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(Z.std(axis=0) - 1) < 1e-9)


def test_transform_does_not_refit():
    X = np.array([[1.0, 4.0], [2.0, np.nan], [3.0, 8.0]])
    pipe = fit_pipeline_matrix(X)
    first = pipe.transform(X.copy())
    second = pipe.transform(X.copy())
    assert np.array_equal(first, second)
    assert np.isnan(X[1, 1])


def test_pipeline_json_round_trip():
    pipe = fit_pipeline(make_dataset(n=8, m=3))
    back = FeaturePipeline.from_dict(json.loads(json.dumps(pipe.to_dict())))
    assert back == pipe


def test_scaler_examples():
    sc = RuntimeScaler(50.0)
    assert scale(sc, 25.0) == 0.5
    assert scale(sc, 50.0) == 1.0
    assert scale(sc, 75.0) == 1.5
    assert unscale_params(sc, RtdParams(Family.EXP, (0.1,))).theta == pytest.approx((5.0,))


def test_fit_scaler_uses_global_max():
    ds = make_dataset(n=5, k=4, seed=2)
    sc = fit_scaler(ds)
    assert sc.max_runtime == max(float(i.times.max()) for i in ds)
    scaled = np.concatenate([scale(sc, i.times) for i in ds])
    assert scaled.max() == 1.0 and scaled.min() > 0
    assert RuntimeScaler.from_dict(sc.to_dict()) == sc


def test_scaled_and_unscaled_evaluation_agree():
    ds = make_dataset(n=10, k=20, seed=4, scale=37.0)
    sc = fit_scaler(ds)
    scores = {}
    for fam in Family:
        scaled_fits = [(mle_fit(fam, scale(sc, i.times)), scale(sc, i.times)) for i in ds]
        in_scaled = normalized_nllh(scaled_fits)
        in_seconds = normalized_nllh([(unscale_params(sc, p), i.times) for (p, _), i in zip(scaled_fits, ds)])
        # max-normalisation cancels the scale factor exactly
        assert in_seconds == pytest.approx(in_scaled, abs=1e-10)
        sum_scaled = normalized_nllh(scaled_fits, per_observation=False)
        sum_seconds = normalized_nllh([(unscale_params(sc, p), i.times) for (p, _), i in zip(scaled_fits, ds)],
                                      per_observation=False)
        offset = np.mean([(i.times.size - 1) * math.log(sc.max_runtime) for i in ds])
        assert sum_seconds == pytest.approx(sum_scaled + offset, abs=1e-9)
        scores[fam] = (in_scaled, in_seconds)
    assert sorted(Family, key=lambda f: scores[f][0]) == sorted(Family, key=lambda f: scores[f][1])
