import csv
import json
import math

import numpy as np
import pytest

from rtdnet.core import Dataset, Instance
from rtdnet.distributions import Family, RtdParams, log_pdf, mle_fit, ppf, sample
from rtdnet.metrics import (
    TIE_BREAK_NOTE,
    FamilyRank,
    instance_nllh,
    kolmogorov_sf,
    ks_pvalue,
    ks_statistic,
    nllh,
    normalized_nllh,
    rank_families,
    ranking_key,
    rejection_rate,
    write_ranking,
)

from oracles import brute_ks

# Direct evaluation of -log p at 1 and e for LOG(1, 1), written out by hand.
LOG_NLLH_1_E = 3.3378770664093453
# Kolmogorov survival at sqrt(100) * 0.136, summed to 1000 terms without truncation.
KS_P_0136_K100 = 0.049485876755377876


def _p(fam, *theta):
    return RtdParams(Family(fam), theta)


def test_nllh_examples():
    assert nllh(_p("EXP", 1.0), [1.0, 1.0]) == pytest.approx(2.0, abs=1e-12)
    assert nllh(_p("N", 0.0, 1.0), [0.0]) == pytest.approx(0.9189385332046727, abs=1e-12)
    assert nllh(_p("LOG", 1.0, 1.0), [1.0, math.e]) == pytest.approx(LOG_NLLH_1_E, abs=1e-12)


def test_nllh_uses_sentinel():
    assert nllh(_p("EXP", 1.0), [1.0, -1.0]) == pytest.approx(1.0 + 1e15)


def test_normalized_single_instance():
    assert normalized_nllh([(_p("EXP", 2.0), [2.0])]) == pytest.approx(1.0, abs=1e-12)
    assert normalized_nllh([(_p("EXP", 2.0), [2.0])], per_observation=False) == pytest.approx(1.0, abs=1e-12)


def test_normalized_is_mean_of_instances():
    a = (_p("EXP", 1.0), [0.5, 2.0])
    b = (_p("LOG", 1.0, 0.5), [1.0, 3.0, 0.7])
    va, vb = normalized_nllh([a]), normalized_nllh([b])
    assert normalized_nllh([a, b]) == pytest.approx((va + vb) / 2, abs=1e-12)


def test_normalized_per_observation_form():
    p, t = _p("LOG", 1.0, 0.5), np.array([1.0, 3.0, 0.7])
    expected = nllh(p, t) / 3 - math.log(3.0)
    assert normalized_nllh([(p, t)]) == pytest.approx(expected, abs=1e-12)
    assert instance_nllh("x", p, t).normalized_nllh == pytest.approx(expected, abs=1e-12)


def test_normalized_multiply_then_log_matches_sum_of_logs():
    rng = np.random.default_rng(0)
    fits = []
    for _ in range(20):
        t = rng.lognormal(0.0, 1.0, size=int(rng.integers(1, 30)))
        fits.append((mle_fit("EXP", t), t))
    # multiply each density by max t, then take logs
    direct = np.mean([
        -np.sum(np.log(np.exp(log_pdf(p, t)) * np.max(t))) / t.size for p, t in fits
    ])
    assert normalized_nllh(fits) == pytest.approx(direct, abs=1e-12)
    sum_form = np.mean([-(np.sum(log_pdf(p, t)) + math.log(np.max(t))) for p, t in fits])
    assert normalized_nllh(fits, per_observation=False) == pytest.approx(sum_form, abs=1e-12)


def test_normalized_empty_is_error():
    with pytest.raises(ValueError):
        normalized_nllh([(_p("EXP", 1.0), [])])


def test_ks_single_point():
    d = ks_statistic(_p("EXP", 1.0), [0.5])
    assert d == pytest.approx(0.6065306597126334, abs=1e-12)
    assert d == pytest.approx(brute_ks(_p("EXP", 1.0), [0.5]), abs=1e-15)


def test_ks_quantile_midpoints():
    p = _p("LOG", 2.0, 0.3)
    for k in (1, 4, 25):
        t = ppf(p, (np.arange(k) + 0.5) / k)
        assert ks_statistic(p, t) == pytest.approx(1 / (2 * k), abs=1e-9)


def test_ks_far_reference():
    assert ks_statistic(_p("EXP", 1e-3), [50.0, 60.0, 70.0]) == pytest.approx(1.0, abs=1e-12)


def test_ks_matches_brute_force():
    rng = np.random.default_rng(1)
    fams = list(Family)
    for _ in range(1000):
        fam = fams[int(rng.integers(4))]
        theta = [float(rng.uniform(0.5, 3.0))] + ([float(rng.uniform(0.2, 2.0))] if fam.n_params == 2 else [])
        p = RtdParams(fam, theta)
        t = rng.gamma(2.0, 0.8, size=int(rng.integers(1, 15)))
        assert ks_statistic(p, t) == brute_ks(p, t) or abs(ks_statistic(p, t) - brute_ks(p, t)) < 1e-15


def test_ks_pvalue_limits():
    assert ks_pvalue(0.0, 100) == 1.0
    assert ks_pvalue(1.0, 100) == 0.0


def test_ks_pvalue_reference():
    assert ks_pvalue(0.136, 100) == pytest.approx(KS_P_0136_K100, abs=1e-9)
    assert round(ks_pvalue(0.136, 100), 4) == 0.0495


def test_ks_pvalue_matches_long_series():
    lam = math.sqrt(100) * 0.136
    s = 2 * sum((-1) ** (j - 1) * math.exp(-2 * j * j * lam * lam) for j in range(1, 1001))
    assert ks_pvalue(0.136, 100) == pytest.approx(s, abs=1e-10)


def test_ks_pvalue_small_sample_correction_is_stricter():
    plain = ks_pvalue(0.136, 100)
    corrected = ks_pvalue(0.136, 100, small_sample_correction=True)
    lam = (10 + 0.12 + 0.011) * 0.136
    assert corrected == pytest.approx(kolmogorov_sf(lam), abs=1e-15)
    assert corrected < plain


def test_ks_pvalue_validation():
    with pytest.raises(ValueError):
        ks_pvalue(1.5, 10)
    with pytest.raises(ValueError):
        ks_pvalue(0.5, 0)


def test_rejection_rate():
    assert rejection_rate([0.005, 0.02, 0.5], 0.01) == pytest.approx(100 / 3)
    assert rejection_rate([1.0, 1.0], 0.01) == 0.0
    assert rejection_rate([0.01], 0.01) == 100.0
    with pytest.raises(ValueError):
        rejection_rate([], 0.01)
    with pytest.raises(ValueError):
        rejection_rate([0.5], 1.0)


def _synthetic(fam, theta_fn, n, k, seed):
    rng = np.random.default_rng(seed)
    insts = []
    for i in range(n):
        p = RtdParams(Family(fam), theta_fn(rng))
        insts.append(Instance(f"i{i:03d}", [float(i)], sample(p, k, rng)))
    return Dataset(tuple(insts), ("f",))


def _log_theta(rng):
    return (float(rng.uniform(0.5, 5.0)), float(rng.uniform(0.3, 1.0)))


def test_rank_log_data_ranks_log_first():
    for seed in range(20):
        ds = _synthetic("LOG", _log_theta, 30, 100, seed)
        assert rank_families(ds)[0].family is Family.LOG


def test_rank_singleton_and_order():
    ds = _synthetic("LOG", _log_theta, 5, 50, 0)
    ranks = rank_families(ds, ["EXP"])
    assert len(ranks) == 1 and ranks[0].family is Family.EXP
    full = rank_families(ds)
    vals = [r.normalized_nllh for r in full]
    assert vals == sorted(vals)


def test_rank_tie_break():
    ranks = [
        FamilyRank(Family.LOG, -0.35, 2.0, 10),
        FamilyRank(Family.INV, -0.35, 1.0, 10),
        FamilyRank(Family.EXP, -0.35, 1.0, 10),
        FamilyRank(Family.N, -0.35, math.nan, 0),
    ]
    ordered = sorted(ranks, key=ranking_key)
    assert [r.family.value for r in ordered] == ["EXP", "INV", "LOG", "N"]


def test_rank_order_matches_reported_table_row():
    # NLLH and KS-rejection values of one reported dataset row
    ranks = [FamilyRank(Family(f), v, rate, 1) for f, v, rate in
             [("EXP", 0.26, 87.5), ("N", -0.75, 20.1), ("INV", -0.88, 4.0), ("LOG", -0.88, 0.1)]]
    ordered = sorted(ranks, key=ranking_key)
    assert [r.family.value for r in ordered] == ["LOG", "INV", "N", "EXP"]


def test_rank_records_fit_failures():
    insts = (Instance("a", [0.0], [1.0]), Instance("b", [1.0], [1.0, 2.0, 3.0]))
    ranks = {r.family: r for r in rank_families(Dataset(insts, ("f",)))}
    assert ranks[Family.LOG].n_failed == 1
    assert ranks[Family.LOG].failed_ids == ["a"]
    assert ranks[Family.EXP].n_failed == 0
    assert ranks[Family.EXP].n_instances == 2


def test_rank_empty_dataset():
    with pytest.raises(ValueError):
        rank_families(Dataset((), ("f",)))


def test_write_ranking(tmp_path):
    ds = _synthetic("EXP", lambda r: (float(r.uniform(1, 3)),), 6, 20, 2)
    doc = write_ranking(rank_families(ds), tmp_path, extra={"alpha": 0.01})
    assert doc["tie_break"] == TIE_BREAK_NOTE
    on_disk = json.loads((tmp_path / "ranking.json").read_text())
    assert on_disk["ranking"] == doc["ranking"]
    rows = list(csv.DictReader((tmp_path / "ranking.csv").open()))
    assert [r["family"] for r in rows] == [r["family"] for r in doc["ranking"]]
    assert float(rows[0]["normalized_nllh"]) == doc["ranking"][0]["normalized_nllh"]


# Shapes must be separable at k=100: LOG with small spread and INV with small
# CV are near-indistinguishable from each other and from N.
@pytest.mark.parametrize("fam,theta_fn", [
    ("LOG", lambda r: (float(r.uniform(0.5, 5.0)), float(r.uniform(1.5, 2.5)))),
    ("EXP", lambda r: (float(r.uniform(0.5, 5.0)),)),
    ("N", lambda r: (float(r.uniform(5.0, 10.0)), float(r.uniform(1.5, 3.0)))),
    ("INV", lambda r: (float(r.uniform(1.0, 3.0)), float(r.uniform(0.1, 0.5)))),
])
def test_true_family_wins_most_instances(fam, theta_fn):
    ds = _synthetic(fam, theta_fn, 100, 100, 17)
    wins = 0
    for inst in ds:
        own = instance_nllh(inst.id, mle_fit(fam, inst.times), inst.times).normalized_nllh
        others = [instance_nllh(inst.id, mle_fit(f, inst.times), inst.times).normalized_nllh
                  for f in Family if f.value != fam]
        wins += own <= min(others)
    assert wins >= 90


def test_kolmogorov_sf_matches_scipy_across_range():
    from scipy.stats import kstwobign

    for lam in np.linspace(0.05, 4.0, 400):
        assert kolmogorov_sf(lam) == pytest.approx(kstwobign.sf(lam), abs=1e-9)
