import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from defectorsim import popmodel
from defectorsim.errors import ConfigurationError, DomainError
from defectorsim.popmodel import PopModel

# 2**1.13 evaluated with mpmath at 30 digits before the build
RATIO_2_POW_113 = 2.18858740252147906


def test_label_presets():
    pc = PopModel.from_label("pc")
    pr = PopModel.from_label("pr")
    uc = PopModel.from_label("uc")
    ur = PopModel.from_label("ur")
    assert (pc.kind, pc.alpha) == (popmodel.POWER_LAW, 1.13)
    assert (pr.kind, pr.alpha) == (popmodel.POWER_LAW, 1.98)
    assert (uc.kind, uc.n_sites) == (popmodel.UNIFORM, 1_000_000)
    assert (ur.kind, ur.n_sites) == (popmodel.UNIFORM, 173_000_000)


def test_unknown_label():
    with pytest.raises(ConfigurationError):
        PopModel.from_label("zz")


def test_rank_ratio_matches_oracle():
    m = PopModel.power_law(1.13, 2)
    ratio = popmodel.probability(m, 1) / popmodel.probability(m, 2)
    assert ratio == pytest.approx(RATIO_2_POW_113, rel=1e-12)


def test_ur_probability():
    assert popmodel.probability(PopModel.from_label("ur"), 12345) == 1 / 173_000_000


def test_single_site_model():
    m = PopModel.power_law(1.13, 1)
    assert popmodel.probability(m, 1) == 1.0
    rng = np.random.default_rng(3)
    assert set(popmodel.sample_many(m, rng, 1000).tolist()) == {1}


@pytest.mark.parametrize("rank", [0, -1, 11])
def test_rank_out_of_range(rank):
    with pytest.raises(DomainError, match="10"):
        popmodel.probability(PopModel.power_law(1.13, 10), rank)


@pytest.mark.parametrize("label", ["pc", "pr", "uc"])
def test_mass_sums_to_one(label):
    m = PopModel.from_label(label)
    total = math.fsum(m.probabilities(np.arange(1, m.n_sites + 1)).tolist())
    assert abs(total - 1.0) < 1e-9


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(1.01, 3.0), n=st.integers(1, 5000))
def test_probability_non_increasing(alpha, n):
    p = PopModel.power_law(alpha, n).probabilities(np.arange(1, n + 1))
    assert np.all(np.diff(p) <= 0)


def test_uniform_frequencies_within_binomial_band():
    # 99.99% binomial interval for p=0.25, n=4e5 is [0.24734, 0.25267]
    m = PopModel.uniform(4)
    draws = popmodel.sample_many(m, np.random.default_rng(11), 400_000)
    freq = np.bincount(draws, minlength=5)[1:] / draws.size
    assert np.all((freq >= 0.2475) & (freq <= 0.2525))


def test_sampler_slope_small_catalog():
    m = PopModel.power_law(1.13, 10_000)
    draws = popmodel.sample_many(m, np.random.default_rng(5), 1_000_000)
    counts = np.bincount(draws, minlength=101)[1:101]
    slope = np.polyfit(np.log(np.arange(1, 101)), np.log(counts), 1)[0]
    assert abs(slope + 1.13) <= 0.05


def test_sampler_agrees_with_independent_pmf():
    # scipy's zipfian is an independent implementation of the truncated power law
    m = PopModel.power_law(1.13, 10_000)
    ranks = np.arange(1, 51)
    assert np.allclose(m.probabilities(ranks), stats.zipfian.pmf(ranks, 1.13, 10_000), rtol=1e-10)
    draws = popmodel.sample_many(m, np.random.default_rng(8), 1_000_000)
    observed = np.bincount(draws, minlength=51)[1:51]
    expected = m.probabilities(ranks) * draws.size
    # lump the tail so the chi-square table sums to the sample size
    obs = np.append(observed, draws.size - observed.sum())
    exp = np.append(expected, draws.size - expected.sum())
    assert stats.chisquare(obs, exp).pvalue > 1e-4


def test_sample_determinism():
    m = PopModel.from_label("pc")
    a = popmodel.sample_many(m, np.random.default_rng(42), 1000)
    b = popmodel.sample_many(m, np.random.default_rng(42), 1000)
    assert np.array_equal(a, b)
    assert popmodel.sample(m, np.random.default_rng(1)) == popmodel.sample(m, np.random.default_rng(1))


def test_ur_draws_stay_in_range():
    m = PopModel.from_label("ur")
    draws = popmodel.sample_many(m, np.random.default_rng(0), 10_000)
    assert draws.min() >= 1 and draws.max() <= 173_000_000
