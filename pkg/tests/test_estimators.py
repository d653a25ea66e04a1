"""Probability/COV estimators against hand and closed-form oracles."""

import math

import numpy as np
import pytest

from mfals.estimators import (
    EstimateReport,
    ProbabilityRecord,
    chain_autocorrelation,
    chain_autocovariance,
    chain_gamma,
    level_cov,
    level_probability,
    pf_estimate,
    total_cov,
)


def _records_from_matrix(mat, level=2):
    """chains x steps value matrix -> records (HF-flagged when 0/1 valued)."""
    out = []
    for i, row in enumerate(mat):
        for k, v in enumerate(row):
            v = float(v)
            out.append(
                ProbabilityRecord(v, v in (0.0, 1.0), chain=i + 1, step=k + 1, level=level)
            )
    return out


def _iid_level(seed, n_chains=200, k=10, p=0.3, level=2):
    rng = np.random.default_rng(seed)
    return _records_from_matrix((rng.uniform(size=(n_chains, k)) < p).astype(float), level)


# ------------------------------------------------------------ probabilities


def test_level_probability_indicator_mean():
    mat = np.zeros((10, 10))
    mat[:1, :] = 1.0  # 10 of 100 fail
    assert level_probability(_records_from_matrix(mat)) == pytest.approx(0.1)


def test_level_probability_constant_half():
    recs = [ProbabilityRecord(0.5, False, 1, k + 1, 2) for k in range(40)]
    assert level_probability(recs) == 0.5


def test_level_probability_mixed_oracle():
    vals = [1.0, 0.0, 0.9772, 0.0228]
    recs = [ProbabilityRecord(v, v in (0.0, 1.0), 1, k + 1, 2) for k, v in enumerate(vals)]
    assert level_probability(recs) == pytest.approx(0.5, abs=1e-12)


def test_level_probability_empty_errors():
    with pytest.raises(ValueError):
        level_probability([])


def test_record_validation():
    with pytest.raises(ValueError):
        ProbabilityRecord(1.2, False, 1, 1, 1)
    with pytest.raises(ValueError):
        ProbabilityRecord(0.4, True, 1, 1, 1)  # expensive eval must be 0/1
    ProbabilityRecord(0.4, False, 1, 1, 1)
    ProbabilityRecord(1.0, True, 1, 1, 1)


# ---------------------------------------------------------- autocovariance


def test_lag_zero_is_bernoulli_variance():
    recs = _iid_level(0)
    p = level_probability(recs)
    assert chain_autocovariance(recs, 0) == pytest.approx(p * (1 - p), abs=1e-15)


def test_iid_chains_have_vanishing_autocovariance():
    recs = _iid_level(1, n_chains=2000, k=10, p=0.3)
    n_pairs = 2000 * 9
    se = math.sqrt(0.3 * 0.7 / n_pairs) * 0.5  # crude scale for the cross moment
    for lag in (1, 3, 9):
        assert abs(chain_autocovariance(recs, lag)) < 4 * math.sqrt(0.21**2 / n_pairs) + 4 * se


def test_constant_chains_zero_autocovariance_at_positive_lag():
    recs = _records_from_matrix(np.full((5, 8), 0.25))
    for lag in range(1, 8):
        assert chain_autocovariance(recs, lag) == pytest.approx(0.0, abs=1e-15)


def test_repeated_chains_unit_autocorrelation():
    # one chain stuck at 1, one stuck at 0: every step repeats the seed
    mat = np.vstack([np.ones(10), np.zeros(10)])
    recs = _records_from_matrix(mat)
    for lag in range(1, 10):
        assert chain_autocorrelation(recs, lag) == pytest.approx(1.0, abs=1e-12)


def test_lag_bounds():
    recs = _records_from_matrix(np.ones((3, 5)))
    with pytest.raises(ValueError):
        chain_autocovariance(recs, 5)
    with pytest.raises(ValueError):
        chain_autocovariance(recs, -1)


# --------------------------------------------------------------- level cov


def test_level1_matches_mc_formula():
    vals = np.zeros(20000)
    vals[:2000] = 1.0
    recs = [ProbabilityRecord(float(v), True, 1, k + 1, 1) for k, v in enumerate(vals)]
    delta, gamma = level_cov(recs)
    assert gamma == 0.0
    assert delta == pytest.approx(math.sqrt(0.9 / 2000.0), rel=1e-12)
    assert delta == pytest.approx(0.02121, abs=5e-5)


def test_fully_correlated_chains_inflate_by_chain_length():
    mat = np.vstack([np.ones((3, 10)), np.zeros((3, 10))])
    recs = _records_from_matrix(mat)
    delta, gamma = level_cov(recs)
    # closed form: 2 * sum_{k=1}^{9} (1 - k/10) = 9
    assert gamma == pytest.approx(9.0, abs=1e-12)
    p = 0.5
    mc = math.sqrt((1 - p) / (p * mat.size))
    assert delta == pytest.approx(mc * math.sqrt(10.0), rel=1e-12)


def test_uncorrelated_chains_recover_mc_cov():
    recs = _iid_level(2, n_chains=5000, k=10, p=0.3)
    p = level_probability(recs)
    delta, gamma = level_cov(recs)
    mc = math.sqrt((1 - p) / (p * len(recs)))
    assert abs(gamma) < 0.05
    assert delta == pytest.approx(mc, rel=0.05)


def test_degenerate_level_reports_infinite_cov():
    recs = _records_from_matrix(np.ones((4, 5)))
    delta, _ = level_cov(recs)
    assert math.isinf(delta)
    delta0, _ = level_cov(_records_from_matrix(np.zeros((4, 5))))
    assert math.isinf(delta0)


def test_literal_weighting_variant_differs():
    recs = _iid_level(3, n_chains=1000, k=10, p=0.3)
    standard = chain_gamma(recs)
    literal = chain_gamma(recs, literal_form=True)
    # for near-zero autocorrelation the misweighted sum approaches 2(K-1)
    assert abs(standard) < 0.2
    assert literal > 10.0


def test_matches_independent_indicator_cov_implementation():
    # independent implementation of the indicator-chain COV, written from the
    # covariance formulas directly
    rng = np.random.default_rng(4)
    base = (rng.uniform(size=(400, 10)) < 0.25).astype(float)
    mat = np.maximum(base, np.roll(base, 1, axis=1))  # correlate along chains
    recs = _records_from_matrix(mat)
    p_hat = float(mat.mean())
    n_c, k_max = mat.shape
    n = mat.size
    r0 = p_hat * (1 - p_hat)
    gamma_ref = 0.0
    for k in range(1, k_max):
        rk = float((mat[:, : k_max - k] * mat[:, k:]).mean()) - p_hat**2
        gamma_ref += 2.0 * (1.0 - k * n_c / n) * (rk / r0)
    delta_ref = math.sqrt((1 - p_hat) / (p_hat * n) * (1 + gamma_ref))
    delta, gamma = level_cov(recs)
    assert gamma == pytest.approx(gamma_ref, rel=1e-12)
    assert delta == pytest.approx(delta_ref, rel=1e-12)


# ---------------------------------------------------------------- totals


def test_total_cov_single_level_identity():
    assert total_cov([0.042]) == 0.042


def test_total_cov_three_levels():
    assert total_cov([0.03, 0.03, 0.03]) == pytest.approx(0.05196, abs=5e-5)


def test_total_cov_degenerate_propagates():
    assert math.isinf(total_cov([0.03, math.inf]))


def test_pf_estimate_arithmetic():
    pf_ind, pf_w = pf_estimate(0.1, [0.1, 0.1, 0.432], 0.432)
    assert pf_ind == pytest.approx(4.32e-3, rel=1e-12)
    assert pf_w == pytest.approx(0.1 * 0.1 * 0.432, rel=1e-12)


def test_pf_weighted_monotone_in_records():
    means = [0.09, 0.12, 0.4]
    _, pf_w = pf_estimate(0.1, means, 0.4)
    _, lo = pf_estimate(0.1, [0.0, 0.0, 0.0], 0.4)
    _, hi = pf_estimate(0.1, [1.0, 1.0, 1.0], 0.4)
    assert lo <= pf_w <= hi


def test_report_validation_and_serialization():
    rep = EstimateReport(
        method="SS",
        pf_indicator=4.3e-3,
        pf_weighted=4.4e-3,
        level_probabilities=[0.1, 0.1, 0.43],
        level_covs=[0.02, 0.03, 0.03],
        level_gammas=[0.0, 1.2, 0.9],
        cov_total=0.047,
        cov_total_uncorrelated=0.031,
        hf_calls=600,
        lf_calls=60000,
        hf_calls_initialization=40,
        level_thresholds=[1.1, 0.4, 0.0],
        converged=True,
        n_levels=3,
        p0=0.1,
        n_per_level=20000,
    )
    blob = rep.to_dict()
    assert blob["hf_calls_adaptive"] == 560
    assert blob["converged"] is True
    with pytest.raises(ValueError):
        EstimateReport(
            method="SS", pf_indicator=1.3, pf_weighted=0.5,
            level_probabilities=[], level_covs=[], level_gammas=[],
            cov_total=0.0, cov_total_uncorrelated=0.0, hf_calls=0, lf_calls=0,
            hf_calls_initialization=0, level_thresholds=[], converged=True,
            n_levels=1, p0=0.1, n_per_level=10,
        )
