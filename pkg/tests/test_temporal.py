"""Endpoint-conditioned returns and the two range constraints."""

import numpy as np
import pytest

from statechrono.mdp import (TabularMdp, policy_reward, random_mdp,
                             random_policy, uniform_policy)
from statechrono.temporal import (UnreachableEndpointError, check_lower_bound,
                                  check_upper_bound, conditioned_return,
                                  endpoint_probability,
                                  lower_bound_violation_sweep, m_star)
from statechrono.verify import conditioned_return_bruteforce


def chain_mdp(gamma=0.5):
    """Deterministic chain 0 -> 1 -> 2 -> 2 with rewards (1, 2, 3)."""
    t = [[[0, 1, 0]], [[0, 0, 1]], [[0, 0, 1]]]
    return TabularMdp(t, [[1.0], [2.0], [3.0]], gamma)


def test_endpoint_probability_k_zero():
    mdp = chain_mdp()
    pi = uniform_policy(mdp)
    assert endpoint_probability(mdp, pi, 1, 1, 0) == 1.0
    assert endpoint_probability(mdp, pi, 1, 2, 0) == 0.0


def test_endpoint_probability_deterministic_chain():
    mdp = chain_mdp()
    pi = uniform_policy(mdp)
    assert endpoint_probability(mdp, pi, 0, 2, 2) == 1.0
    assert endpoint_probability(mdp, pi, 0, 1, 2) == 0.0


def test_endpoint_probability_uniform_mixing():
    mdp = TabularMdp([[[0.5, 0.5]], [[0.5, 0.5]]], [[0.0], [0.0]], 0.9)
    pi = uniform_policy(mdp)
    assert endpoint_probability(mdp, pi, 0, 1, 1) == 0.5


def test_endpoint_probability_sums_to_one():
    mdp = random_mdp(5, 2, 0.9, seed=1)
    pi = random_policy(mdp, 2)
    for k in range(4):
        total = sum(endpoint_probability(mdp, pi, 2, y, k) for y in range(5))
        assert total == pytest.approx(1.0, abs=1e-12)


def test_conditioned_return_k_zero_is_state_reward():
    mdp = random_mdp(4, 2, 0.9, seed=3)
    pi = random_policy(mdp, 4)
    r = policy_reward(mdp, pi)
    for x in range(4):
        ret = conditioned_return(mdp, pi, x, x, 0)
        assert ret.value == pytest.approx(r[x], abs=1e-15)
        assert ret.endpoint_prob == 1.0


def test_conditioned_return_chain_hand_sum():
    ret = conditioned_return(chain_mdp(0.5), uniform_policy(chain_mdp()), 0, 2, 2)
    assert ret.value == 2.75
    assert ret.endpoint_prob == 1.0
    assert ret.k == 2


def test_conditioned_return_gamma_zero():
    mdp = random_mdp(4, 2, 0.0, seed=5)
    pi = random_policy(mdp, 6)
    r = policy_reward(mdp, pi)
    for x in range(4):
        for y in range(4):
            try:
                ret = conditioned_return(mdp, pi, x, y, 2)
            except UnreachableEndpointError:
                continue
            assert ret.value == pytest.approx(r[x], abs=1e-12)


def test_conditioned_return_matches_path_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(5):
        n = int(rng.integers(2, 6))
        mdp = random_mdp(n, 2, 0.9, seed=int(rng.integers(1000)), max_support=3)
        pi = random_policy(mdp, int(rng.integers(1000)))
        k = int(rng.integers(0, 6))
        for x in range(n):
            for y in range(n):
                brute = conditioned_return_bruteforce(mdp, pi, x, y, k)
                if brute is None:
                    with pytest.raises(UnreachableEndpointError):
                        conditioned_return(mdp, pi, x, y, k)
                    continue
                got = conditioned_return(mdp, pi, x, y, k)
                assert got.value == pytest.approx(brute[0], abs=1e-10)
                assert got.endpoint_prob == pytest.approx(brute[1], abs=1e-12)


def test_conditioned_return_unreachable_endpoint_raises():
    mdp = chain_mdp()
    pi = uniform_policy(mdp)
    with pytest.raises(UnreachableEndpointError, match="unreachable"):
        conditioned_return(mdp, pi, 0, 0, 2)


def test_conditioned_return_ignores_unreachable_rewards():
    """Perturbing rewards outside the k-step reachable set changes nothing."""
    t = [[[0, 1, 0]], [[1, 0, 0]], [[0, 0, 1]]]
    base = TabularMdp(t, [[1.0], [2.0], [5.0]], 0.9)
    bumped = TabularMdp(t, [[1.0], [2.0], [-77.0]], 0.9)
    pi = uniform_policy(base)
    a = conditioned_return(base, pi, 0, 0, 2)
    b = conditioned_return(bumped, pi, 0, 0, 2)
    assert a.value == b.value


def test_m_star_single_action_equals_conditioned_return():
    mdp = chain_mdp(0.5)
    pi = uniform_policy(mdp)
    star = m_star(mdp, 0, 2, 2)
    plain = conditioned_return(mdp, pi, 0, 2, 2)
    assert star.value == plain.value


def test_m_star_dominating_action():
    """Action 0 strictly dominates rewards with shared dynamics, so the
    greedy conditioned return exceeds the uniform policy's."""
    t = [[[0.5, 0.5], [0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]]]
    mdp = TabularMdp(t, [[1.0, 0.0], [1.0, 0.0]], 0.9)
    star = m_star(mdp, 0, 1, 3)
    uni = conditioned_return(mdp, uniform_policy(mdp), 0, 1, 3)
    assert star.value >= uni.value


def test_m_star_unreachable_under_greedy_raises():
    """Greedy avoids state 2 even though another policy reaches it."""
    t = [[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
         [[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
         [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]]
    mdp = TabularMdp(t, [[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]], 0.9)
    assert endpoint_probability(mdp, Policy_like_action1(mdp), 0, 2, 1) == 1.0
    with pytest.raises(UnreachableEndpointError):
        m_star(mdp, 0, 2, 1)


def Policy_like_action1(mdp):
    from statechrono.mdp import Policy
    probs = np.zeros((mdp.n_states, mdp.n_actions))
    probs[:, 1] = 1.0
    return Policy(probs)


def test_check_lower_bound_exact_boundary():
    mdp = chain_mdp(0.5)
    pi = uniform_policy(mdp)
    value = conditioned_return(mdp, pi, 0, 2, 2).value
    res = check_lower_bound(mdp, pi, 0, 2, 2, value)
    assert res.satisfied and res.gap == 0.0
    res = check_lower_bound(mdp, pi, 0, 2, 2, value - 1.0)
    assert not res.satisfied and res.gap == -1.0


def test_check_upper_bound():
    res = check_upper_bound(0.0, 0.0, 0.0, 0.0)
    assert res.satisfied and res.slack == 0.0
    res = check_upper_bound(5.0, 1.0, 1.0, 1.0)
    assert not res.satisfied and res.slack == -2.0
    # identical rollouts: zero distances, matching measurements
    res = check_upper_bound(-2.5, 0.0, 0.0, -2.5)
    assert res.satisfied and res.slack == 0.0
    with pytest.raises(ValueError, match="non-negative"):
        check_upper_bound(1.0, -0.1, 0.0, 0.0)


def test_lower_bound_violation_sweep_reports():
    mdp = random_mdp(4, 2, 0.9, seed=8, max_support=3)
    sweep = lower_bound_violation_sweep(mdp, 0, 1, 3, n_policies=40, seed=0)
    assert 0.0 <= sweep.violation_rate <= 1.0
    assert sweep.n_evaluated <= sweep.n_policies
    assert np.isfinite(sweep.m_star_value)
    reuse = lower_bound_violation_sweep(mdp, 0, 1, 3, n_policies=40, seed=0,
                                        m_value=sweep.m_star_value)
    assert reuse.violation_rate == sweep.violation_rate
