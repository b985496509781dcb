import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beagle.analysis import (AcceptanceProfile, DegradationModel, DomainError, analyze_profile,
                             expected_acceptance_length, fit_geometric, geometric_profile,
                             jensen_gap_check, mc_acceptance_oracle, surrogate_bound_check,
                             taylor_remainder_bound, taylor_surrogate_J)

probs = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8)


def random_pairs(rng, k, n, sparse=False):
    pairs = []
    for _ in range(k):
        p = rng.dirichlet(np.ones(n) * rng.uniform(0.2, 2.0))
        if sparse:
            p[rng.random(n) < 0.3] = 0.0
            p = p / p.sum() if p.sum() > 0 else np.eye(n)[0]
        q = rng.dirichlet(np.ones(n) * rng.uniform(0.2, 2.0))
        pairs.append((p, q))
    return pairs


# -- tail sum ---------------------------------------------------------------------------------------

def test_expected_length_examples():
    assert expected_acceptance_length([1, 1, 1, 1]) == 4
    assert expected_acceptance_length([0.8, 0.8, 0.8]) == pytest.approx(1.952)
    assert expected_acceptance_length([0.0, 0.9, 0.9]) == 0


def test_profile_validation():
    with pytest.raises(ValueError):
        AcceptanceProfile([1.2])
    with pytest.raises(ValueError):
        AcceptanceProfile([])
    with pytest.raises(ValueError):
        AcceptanceProfile([np.nan])
    assert AcceptanceProfile([0.5, 0.2]).k == 2


@given(probs, st.data())
def test_expected_length_is_monotone_in_every_rate(alpha, data):
    i = data.draw(st.integers(0, len(alpha) - 1))
    up = list(alpha)
    up[i] = data.draw(st.floats(alpha[i], 1.0))
    assert expected_acceptance_length(up) >= expected_acceptance_length(alpha) - 1e-12


@given(probs)
def test_expected_length_between_zero_and_k(alpha):
    assert 0 <= expected_acceptance_length(alpha) <= len(alpha) + 1e-12


# -- Monte Carlo oracle -----------------------------------------------------------------------------

def test_mc_certain_acceptance():
    assert mc_acceptance_oracle(AcceptanceProfile([1.0] * 5), 1000) == (5.0, 0.0)


def test_mc_matches_tail_sum_example():
    mean, se = mc_acceptance_oracle(AcceptanceProfile([0.8, 0.8, 0.8]), 1_000_000, seed=0)
    assert abs(mean - 1.952) <= 3 * se


def test_mc_is_seeded():
    prof = AcceptanceProfile([0.7, 0.4])
    assert mc_acceptance_oracle(prof, 500, seed=3) == mc_acceptance_oracle(prof, 500, seed=3)
    with pytest.raises(ValueError):
        mc_acceptance_oracle(prof, 0)


def test_mc_matches_tail_sum_on_random_profiles():
    rng = np.random.default_rng(0)
    misses = 0
    for _ in range(100):
        alpha = rng.random(int(rng.integers(1, 9)))
        mean, se = mc_acceptance_oracle(AcceptanceProfile(alpha), 50_000, seed=int(rng.integers(2**31)))
        misses += abs(mean - expected_acceptance_length(alpha)) > 3 * se
    assert misses == 0


def test_mc_pairs_use_min_ratio_acceptance():
    # sampling from q and accepting with min(1, p/q) accepts with probability sum(min(p, q))
    rng = np.random.default_rng(1)
    for _ in range(10):
        pairs = random_pairs(rng, 4, 6)
        alpha = [float(np.minimum(p, q).sum()) for p, q in pairs]
        mean, se = mc_acceptance_oracle(pairs, 100_000, seed=int(rng.integers(2**31)))
        assert abs(mean - expected_acceptance_length(alpha)) <= 3 * se


# -- Taylor surrogate -------------------------------------------------------------------------------

def test_J_examples():
    assert taylor_surrogate_J([1.0] * 4) == 4
    assert taylor_surrogate_J([0.8, 0.8, 0.8]) == pytest.approx(6 * math.log(0.8) + 3)
    assert taylor_surrogate_J([0.8, 0.8, 0.8]) == pytest.approx(1.6612, abs=1e-4)
    with pytest.raises(DomainError):
        taylor_surrogate_J([0.5, 0.0])


def test_near_one_regime():
    alpha = [0.99] * 5
    assert abs(expected_acceptance_length(alpha) - taylor_surrogate_J(alpha)) < 0.01


@settings(max_examples=300)
@given(st.lists(st.floats(1e-3, 1.0), min_size=1, max_size=10))
def test_remainder_bound_holds(alpha):
    gap = abs(expected_acceptance_length(alpha) - taylor_surrogate_J(alpha))
    assert gap <= taylor_remainder_bound(alpha) + 1e-9


@given(st.lists(st.floats(0.9, 1.0), min_size=1, max_size=10))
def test_remainder_bound_small_near_one(alpha):
    k = len(alpha)
    assert taylor_remainder_bound(alpha) <= k * (k * math.log(0.9)) ** 2 / 2 + 1e-12


# -- geometric degradation --------------------------------------------------------------------------

def test_geometric_examples():
    assert np.allclose(geometric_profile(DegradationModel(0.9, 0.8), 3).alpha, [0.9, 0.72, 0.576])
    assert geometric_profile(DegradationModel(0.7, 1.0), 4).alpha.tolist() == [0.7] * 4
    assert geometric_profile(DegradationModel(0.6, 0.5), 1).alpha.tolist() == [0.6]
    with pytest.raises(ValueError):
        DegradationModel(0.5, 0.0)
    with pytest.raises(ValueError):
        DegradationModel(1.5, 0.5)


@given(st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.integers(2, 8))
def test_fit_recovers_geometric_parameters(a1, r, k):
    fit = fit_geometric(geometric_profile(DegradationModel(a1, r), k))
    assert fit.alpha1 == pytest.approx(a1, rel=1e-6) and fit.r == pytest.approx(r, rel=1e-6)


def test_fit_needs_two_positive_rates():
    assert fit_geometric([0.5, 0.0, 0.0]) is None


# -- Jensen ---------------------------------------------------------------------------------------------

def test_jensen_examples():
    n = 7
    u = np.full(n, 1 / n)
    res = jensen_gap_check(u, u)
    assert res.lhs == pytest.approx(math.log(n)) and res.rhs == pytest.approx(math.log(n)) and res.holds
    res = jensen_gap_check([0.5, 0.5], [0.9, 0.1])
    assert res.lhs == pytest.approx(1.2040, abs=1e-4) and res.rhs == pytest.approx(0.6931, abs=1e-4)
    assert res.holds


def test_jensen_domain_errors():
    with pytest.raises(DomainError):
        jensen_gap_check([0.5, 0.5], [1.0, 0.0])
    with pytest.raises(ValueError):
        jensen_gap_check([0.5, 0.6], [0.5, 0.5])


def test_jensen_sweep():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 17))
        (p, q), = random_pairs(rng, 1, n, sparse=True)
        assert jensen_gap_check(p, q).holds


def test_jensen_equality_iff_q_constant_on_support():
    p = np.array([0.2, 0.3, 0.5, 0.0])
    q = np.array([0.3, 0.3, 0.3, 0.1])
    res = jensen_gap_check(p, q)
    assert res.lhs == pytest.approx(res.rhs, abs=1e-12)
    res = jensen_gap_check(p, np.array([0.2, 0.3, 0.4, 0.1]))
    assert res.lhs > res.rhs + 1e-6


# -- surrogate bounds ---------------------------------------------------------------------------------

def entropy(p):
    s = p > 0
    return float(-np.sum(p[s] * np.log(p[s])))


def test_surrogate_gap_at_q_equal_p():
    rng = np.random.default_rng(2)
    pairs = [(p, p) for p, _ in random_pairs(rng, 4, 5)]
    rep = surrogate_bound_check(pairs)
    expect = sum((4 - i) * (entropy(p) + math.log(float(p @ p))) for i, (p, _) in enumerate(pairs))
    assert rep.late_holds and rep.late_gap == pytest.approx(expect, abs=1e-12)


def test_surrogate_k1_bounds_coincide():
    (p, q), = random_pairs(np.random.default_rng(3), 1, 6)
    rep = surrogate_bound_check([(p, q)])
    assert rep.late_bound == pytest.approx(rep.early_bound) and rep.late_loss == pytest.approx(rep.early_loss)


def degrade(p, q, a1):
    """Move q toward p's least likely token until E_p[q] <= a1; None if that is not enough."""
    worst = np.eye(len(p))[np.argmin(p)]
    for t in np.linspace(0.0, 0.99, 100):  # stop short of one-hot so q stays positive
        cand = (1 - t) * q + t * worst
        if p @ cand <= a1:
            return cand
    return None


def test_surrogate_sweep_never_violated():
    rng = np.random.default_rng(4)
    for _ in range(500):
        k, n = int(rng.integers(1, 7)), int(rng.integers(2, 13))
        late = random_pairs(rng, k, n)
        a1 = float(late[0][0] @ late[0][1])
        # parallel predictions further ahead are no better than the first one
        early = [late[0]]
        for p, q in random_pairs(rng, k - 1, n):
            q2 = degrade(p, q, a1)
            early.append((p, q2) if q2 is not None else late[0])
        rep = surrogate_bound_check(late, early)
        assert rep.early_premise
        assert rep.late_holds and rep.early_holds
        assert np.all(rep.jensen_gaps >= -1e-12)


def test_early_bound_flags_missing_premise():
    # a later parallel prediction beating the first one can break the early bound; the report says why
    p1, q1 = np.array([0.5, 0.5]), np.array([0.9, 0.1])
    p2 = np.array([1.0, 0.0])
    rep = surrogate_bound_check([(p1, q1), (p2, p2)], [(p1, q1), (p2, p2)])
    assert not rep.early_premise and not rep.early_holds


# -- report ---------------------------------------------------------------------------------------------

def test_analyze_profile_report():
    rep = analyze_profile([0.9, 0.72, 0.576], mean_tau=2.9)
    rows = dict(rep.rows())
    assert float(rows["expected_length"]) == pytest.approx(0.9 + 0.648 + 0.373248, abs=1e-6)
    assert float(rows["geometric_r"]) == pytest.approx(0.8, abs=1e-6)
    assert rows["within_remainder_bound"] == "True"
    assert "mean_tau" in rep.summary()


def test_analyze_profile_with_zero_rate():
    rep = analyze_profile([0.5, 0.0])
    assert rep.J == float("-inf") and not rep.within_remainder_bound
