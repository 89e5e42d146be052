import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from imiwae.exceptions import DomainError, SpecError
from imiwae.nn import make_rng
from imiwae.theory import (THEORY_CHECKS, DiscreteMechanism, WeightLaw, check_bias_variance,
                           check_convergence_probability, check_lemma1, check_monotone_bounds,
                           lemma1_oracle, patterns, run_theory_check, threshold_decoder)

# lognormal(0, 0.5): log mu = sigma^2 / 2, cv^2 = exp(sigma^2) - 1
LOG_MU = 0.125
CV2 = 0.2840254166877414


def test_lognormal_moments_against_scipy():
    law = WeightLaw.lognormal(0.3, 0.5)
    ref = stats.lognorm(s=0.5, scale=math.exp(0.3))
    mean, var, skew = ref.stats(moments="mvs")
    assert law.mean == pytest.approx(float(mean), rel=1e-12)
    assert law.mu2 == pytest.approx(float(var), rel=1e-12)
    assert law.mu3 == pytest.approx(float(skew) * float(var) ** 1.5, rel=1e-10)


def test_standard_lognormal_constants():
    law = WeightLaw.lognormal(0.0, 0.5)
    assert law.log_mean == LOG_MU
    assert law.cv2 == pytest.approx(CV2, rel=1e-14)
    assert 100 * law.predicted_bias(100) == pytest.approx(-0.1420127, abs=1e-7)


def test_two_point_moments_by_enumeration():
    a, b, q = 0.5, 3.0, 0.2
    law = WeightLaw.two_point(a, b, q)
    vals, probs = np.array([a, b]), np.array([q, 1 - q])
    mean = probs @ vals
    assert law.mean == pytest.approx(mean)
    assert law.mu2 == pytest.approx(probs @ (vals - mean) ** 2)
    assert law.mu3 == pytest.approx(probs @ (vals - mean) ** 3)


def test_weight_law_validation():
    with pytest.raises(DomainError):
        WeightLaw.constant(0.0)
    with pytest.raises(DomainError):
        WeightLaw.two_point(-1, 1, 0.5)
    with pytest.raises(DomainError):
        WeightLaw("gamma", (1.0,))


def test_sample_ratio_has_unit_mean():
    law = WeightLaw.two_point(0.5, 3.0, 0.2)
    draws = law.sample_ratio(make_rng(0), (200_000,))
    assert abs(draws.mean() - 1.0) < 0.01


def test_constant_law_monotone_exact():
    rep = check_monotone_bounds(WeightLaw.constant(2.5), Ks=(1, 2, 5), outer_reps=10_000)
    assert rep.passed
    assert rep.details["L_K"] == [math.log(2.5)] * 3


def test_lognormal_monotone_bounds():
    rep = check_monotone_bounds(WeightLaw.lognormal(), Ks=(1, 2, 5, 20, 100), outer_reps=20_000)
    assert rep.passed
    L = rep.details["L_K"]
    assert abs(L[0]) < 4 * rep.details["se"][0]     # E[log w] = 0
    assert all(v < LOG_MU for v in L)


def test_monotone_argument_checks():
    with pytest.raises(SpecError):
        check_monotone_bounds(WeightLaw.lognormal(), Ks=(5, 2), outer_reps=10_000)
    with pytest.raises(SpecError):
        check_monotone_bounds(WeightLaw.lognormal(), outer_reps=100)


def test_constant_law_bias_variance_zero():
    rep = check_bias_variance(WeightLaw.constant(3.0), Ks=(10,), reps=1_000_000)
    row = rep.details["per_K"][0]
    assert rep.passed and row["bias"] == 0.0 and row["variance"] == 0.0


def test_bias_variance_needs_many_reps():
    with pytest.raises(SpecError):
        check_bias_variance(WeightLaw.lognormal(), reps=1000)


def test_convergence_constant_law_zero():
    rep = check_convergence_probability(WeightLaw.constant(1.7), K_grid=(1, 10), trials=1000)
    assert rep.details["exceedance"] == [0.0, 0.0]


def test_convergence_decreases():
    rep = check_convergence_probability(WeightLaw.lognormal(), K_grid=(10, 1000), trials=10_000)
    prob = rep.details["exceedance"]
    assert prob[1] < prob[0]
    assert rep.details["within_chebyshev"]
    with pytest.raises(SpecError):
        check_convergence_probability(WeightLaw.lognormal(), epsilon=0.0)


def test_patterns_orderings():
    assert patterns(2) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert patterns(2, "lsb") == [(0, 0), (1, 0), (0, 1), (1, 1)]
    assert patterns(3).index((0, 0, 1)) < patterns(3).index((0, 1, 0))
    with pytest.raises(SpecError):
        patterns(2, "middle")


def test_single_threshold_example():
    mech = DiscreteMechanism(1, {0: {(0,): 0.3, (1,): 0.7}})
    decoder, breaks = threshold_decoder(mech, 0)
    np.testing.assert_array_equal(decoder([0.1, 0.29, 0.31, 0.9])[:, 0], [0, 0, 1, 1])
    np.testing.assert_allclose(breaks, [0.0, 0.3, 1.0])
    assert lemma1_oracle(mech, 0).max_error_exact < 1e-12


def test_two_variable_example_by_enumeration():
    probs = {(0, 0): 0.1, (0, 1): 0.2, (1, 0): 0.3, (1, 1): 0.4}
    mech = DiscreteMechanism(2, {"x": probs})
    decoder, _ = threshold_decoder(mech, "x")
    # pieces (0,.1], (.1,.3], (.3,.6], (.6,1] carry patterns in binary order
    mids = np.array([0.05, 0.2, 0.45, 0.8])
    np.testing.assert_array_equal(decoder(mids), [[0, 0], [0, 1], [1, 0], [1, 1]])
    res = lemma1_oracle(mech, "x", u_grid_size=1000)
    for r, pr in probs.items():
        assert abs(res.exact[r] - pr) < 1e-12
    assert res.max_error_grid < 2 / 1000


@pytest.mark.parametrize("order", ["msb", "lsb"])
def test_random_three_variable_tables_exact(order):
    rep = check_lemma1(n_tables=30, ps=(3,), seed=4, order=order)
    assert rep.passed and rep.details["max_error_exact"] < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2 ** 20))
def test_oracle_exact_for_any_table(p, seed):
    mech = DiscreteMechanism.random(p, 2, make_rng(seed))
    for x in mech.probs:
        res = lemma1_oracle(mech, x)
        assert res.max_error_exact < 1e-12
        assert res.max_error_grid < 2 / res.grid_size


def test_oracle_with_zero_mass_patterns():
    probs = {(0, 0): 0.0, (0, 1): 0.5, (1, 0): 0.0, (1, 1): 0.5}
    res = lemma1_oracle(DiscreteMechanism(2, {0: probs}), 0)
    assert res.max_error_exact < 1e-12


def test_mechanism_validation():
    with pytest.raises(DomainError):
        DiscreteMechanism(1, {0: {(0,): 0.3, (1,): 0.6}})
    with pytest.raises(DomainError):
        DiscreteMechanism(1, {0: {(0,): -0.1, (1,): 1.1}})
    with pytest.raises(DomainError):
        DiscreteMechanism(4, {})
    mech = DiscreteMechanism(1, {0: {(0,): 0.5, (1,): 0.5}})
    with pytest.raises(DomainError):
        lemma1_oracle(mech, 7)
    with pytest.raises(SpecError):
        lemma1_oracle(mech, 0, u_grid_size=10)


def test_run_theory_check_dispatch():
    assert set(THEORY_CHECKS) == {"lemma1", "monotone_bounds", "bias_variance", "convergence_probability"}
    rep = run_theory_check("lemma1", seed=1, n_tables=10)
    assert rep.passed and rep.to_dict()["name"] == "lemma1"
    with pytest.raises(SpecError):
        run_theory_check("nope")


def test_checks_are_pure_in_seed():
    a = check_monotone_bounds(WeightLaw.lognormal(), Ks=(1, 10), outer_reps=10_000, seed=3)
    b = check_monotone_bounds(WeightLaw.lognormal(), Ks=(1, 10), outer_reps=10_000, seed=3)
    assert a.to_dict() == b.to_dict()
