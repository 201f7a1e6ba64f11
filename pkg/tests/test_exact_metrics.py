"""Exact metric fixed points against hand values and independent oracles."""

import numpy as np
import pytest

from statechrono.exact_metrics import (ChronoMetricTable, ConvergenceError,
                                       MetricTable, bisim_fixed_point,
                                       bisim_operator, chrono_fixed_point,
                                       chrono_table_to_csv,
                                       contraction_iteration_bound,
                                       metric_table_to_csv, mico_fixed_point,
                                       mico_operator, wasserstein1)
from statechrono.mdp import (TabularMdp, policy_reward, random_mdp,
                             random_policy, uniform_policy)
from statechrono.verify import (chrono_bruteforce, mico_operator_naive,
                                transport_polytope_minimum)


def two_state_absorbing(gamma=0.9):
    return TabularMdp([[[1.0, 0.0]], [[0.0, 1.0]]], [[1.0], [0.0]], gamma)


# --- wasserstein1 -----------------------------------------------------------

def test_wasserstein_identical_inputs():
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert wasserstein1([0.3, 0.7], [0.3, 0.7], cost) == 0.0


def test_wasserstein_point_masses():
    cost = np.array([[0.0, 2.5], [1.5, 0.0]])
    assert wasserstein1([0.0, 1.0], [1.0, 0.0], cost) == 1.5


def test_wasserstein_hand_lp():
    """Move the second half of the mass at cost 2."""
    cost = np.array([[0.0, 9.0], [2.0, 9.0]])
    assert wasserstein1([0.5, 0.5], [1.0, 0.0], cost) == pytest.approx(1.0, abs=1e-12)


def test_wasserstein_rejects_non_normalized():
    with pytest.raises(ValueError, match="non-normalized"):
        wasserstein1([0.5, 0.4], [1.0, 0.0], np.zeros((2, 2)))
    with pytest.raises(ValueError, match="non-normalized"):
        wasserstein1([1.5, -0.5], [1.0, 0.0], np.zeros((2, 2)))


def test_wasserstein_rejects_negative_cost():
    with pytest.raises(ValueError, match="non-negative"):
        wasserstein1([1.0], [1.0], [[-1.0]])


def test_wasserstein_matches_vertex_enumeration():
    rng = np.random.default_rng(42)
    for _ in range(25):
        m, n = rng.integers(1, 5, size=2)
        mu = rng.random(m) + 0.1
        mu /= mu.sum()
        nu = rng.random(n) + 0.1
        nu /= nu.sum()
        cost = rng.uniform(0, 3, (m, n))
        assert wasserstein1(mu, nu, cost) == pytest.approx(
            transport_polytope_minimum(mu, nu, cost), abs=1e-9)


def test_wasserstein_larger_supports():
    rng = np.random.default_rng(7)
    mu = rng.random(30)
    mu /= mu.sum()
    nu = rng.random(40)
    nu /= nu.sum()
    x = rng.normal(size=30)
    y = rng.normal(size=40)
    cost = np.abs(x[:, None] - y[None, :])
    got = wasserstein1(mu, nu, cost)
    # 1-D optimal transport with |x - y| cost has a quantile-coupling answer
    qs = np.linspace(0, 1, 2001)[1:-1]
    xs = np.sort(x)
    ys = np.sort(y)
    fx = np.searchsorted(np.cumsum(mu[np.argsort(x)]), qs)
    fy = np.searchsorted(np.cumsum(nu[np.argsort(y)]), qs)
    approx = np.mean(np.abs(xs[np.clip(fx, 0, 29)] - ys[np.clip(fy, 0, 39)]))
    assert got == pytest.approx(approx, abs=2e-2)


# --- fixed points -----------------------------------------------------------

def test_bisim_gamma_zero_reward_difference():
    mdp = random_mdp(4, 2, 0.0, seed=0)
    pi = uniform_policy(mdp)
    table = bisim_fixed_point(mdp, pi)
    r = policy_reward(mdp, pi)
    assert np.max(np.abs(table.values - np.abs(r[:, None] - r[None, :]))) <= 1e-12


def test_bisim_two_state_absorbing():
    table = bisim_fixed_point(two_state_absorbing(0.9), uniform_policy(two_state_absorbing()))
    assert table.values[0, 1] == pytest.approx(10.0, abs=1e-8)
    assert table.values[0, 0] == 0.0
    assert table.residual <= 1e-10


def test_bisim_identical_states_distance_zero():
    # states 0 and 1 share rewards and dynamics, state 2 differs
    t = [[[0.5, 0.5, 0.0]], [[0.5, 0.5, 0.0]], [[0.0, 0.0, 1.0]]]
    mdp = TabularMdp(t, [[1.0], [1.0], [0.0]], 0.9)
    table = bisim_fixed_point(mdp, uniform_policy(mdp))
    assert table.values[0, 1] <= 1e-10


def test_mico_gamma_zero():
    mdp = random_mdp(4, 2, 0.0, seed=1)
    pi = uniform_policy(mdp)
    table = mico_fixed_point(mdp, pi)
    r = policy_reward(mdp, pi)
    assert np.max(np.abs(table.values - np.abs(r[:, None] - r[None, :]))) <= 1e-12


def test_mico_two_state_absorbing():
    mdp = two_state_absorbing(0.9)
    table = mico_fixed_point(mdp, uniform_policy(mdp))
    assert table.values[0, 1] == pytest.approx(10.0, abs=1e-8)
    assert table.values[0, 0] == 0.0


def test_mico_stochastic_self_distance_vs_naive_unroll():
    """Stochastic self-transitions give a positive self-distance; 50 naive
    operator applications reproduce the table."""
    mdp = random_mdp(4, 2, 0.5, seed=5)
    pi = random_policy(mdp, 6)
    table = mico_fixed_point(mdp, pi, tol=1e-12)
    assert table.values.diagonal().max() > 0.0
    d = np.zeros((4, 4))
    for _ in range(50):
        d = mico_operator_naive(mdp, pi, d)
    assert np.max(np.abs(d - table.values)) <= 1e-9


def test_chrono_base_case_and_hand_values():
    mdp = two_state_absorbing(0.9)
    pi = uniform_policy(mdp)
    table = chrono_fixed_point(mdp, pi, 2)
    assert np.array_equal(table.values[0], np.zeros((2, 2)))
    assert table.values[1][0, 1] == 1.0
    assert table.values[2][0, 1] == pytest.approx(1.9, abs=1e-15)
    assert table.max_steps == 2


def test_chrono_zero_steps_only():
    mdp = random_mdp(3, 2, 0.9, seed=2)
    table = chrono_fixed_point(mdp, uniform_policy(mdp), 0)
    assert table.values.shape == (1, 3, 3)
    assert np.array_equal(table.values, np.zeros((1, 3, 3)))


def test_chrono_matches_path_enumeration():
    mdp = random_mdp(4, 2, 0.9, seed=3, max_support=3)
    pi = random_policy(mdp, 4)
    table = chrono_fixed_point(mdp, pi, 4)
    brute = chrono_bruteforce(mdp, pi, 4)
    assert np.max(np.abs(table.values - brute)) <= 1e-10


def test_chrono_converges_to_mico_with_bound():
    mdp = random_mdp(5, 2, 0.9, seed=4, max_support=3)
    pi = random_policy(mdp, 5)
    mico = mico_fixed_point(mdp, pi, tol=1e-12)
    chrono = chrono_fixed_point(mdp, pi, 20)
    r = policy_reward(mdp, pi)
    r_range = float(np.max(np.abs(r[:, None] - r[None, :])))
    for k in range(21):
        gap = float(np.max(np.abs(chrono.values[k] - mico.values)))
        assert gap <= 0.9 ** k * r_range / 0.1 + 1e-9


def test_operators_contract_per_step():
    mdp = random_mdp(6, 3, 0.9, seed=8, max_support=4)
    pi = random_policy(mdp, 9)
    for fn in (mico_fixed_point, bisim_fixed_point):
        table = fn(mdp, pi, 1e-10)
        ch = table.step_changes
        assert np.all(ch[1:] <= 0.9 * ch[:-1] + 1e-12)
        assert table.iterations <= contraction_iteration_bound(
            0.9, float(table.step_changes[0]), 1e-10)


def test_fixed_point_consistency_under_operator():
    mdp = random_mdp(5, 2, 0.8, seed=10, max_support=3)
    pi = random_policy(mdp, 11)
    mico = mico_fixed_point(mdp, pi, 1e-10)
    assert np.max(np.abs(mico_operator(mdp, pi, mico.values) - mico.values)) <= 1e-10
    bis = bisim_fixed_point(mdp, pi, 1e-10)
    assert np.max(np.abs(bisim_operator(mdp, pi, bis.values) - bis.values)) <= 1e-10


def test_bisim_dominated_by_mico():
    """Independent coupling is feasible for the transport problem, so the
    Wasserstein term never exceeds the sampled-coupling term."""
    for seed in range(6):
        mdp = random_mdp(5, 2, 0.9, seed=seed, max_support=3)
        pi = random_policy(mdp, seed + 100)
        b = bisim_fixed_point(mdp, pi)
        m = mico_fixed_point(mdp, pi)
        assert np.all(b.values <= m.values + 1e-9)


def test_tables_symmetric_and_nonnegative():
    mdp = random_mdp(7, 3, 0.9, seed=13, max_support=4)
    pi = random_policy(mdp, 14)
    for fn in (mico_fixed_point, bisim_fixed_point):
        table = fn(mdp, pi)
        assert np.max(np.abs(table.values - table.values.T)) <= 1e-10
        assert table.values.min() >= 0.0


def test_convergence_error_carries_last_iterate():
    mdp = two_state_absorbing(0.9)
    pi = uniform_policy(mdp)
    with pytest.raises(ConvergenceError) as exc_info:
        mico_fixed_point(mdp, pi, tol=1e-10, max_iter=3)
    last = exc_info.value.last_table
    assert last.shape == (2, 2)
    assert last[0, 1] > 0.0


def test_csv_exports(tmp_path):
    mdp = two_state_absorbing(0.5)
    pi = uniform_policy(mdp)
    table = mico_fixed_point(mdp, pi)
    path = tmp_path / "mico.csv"
    metric_table_to_csv(table.values, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "x,y,value"
    assert len(lines) == 1 + 4
    chrono = chrono_fixed_point(mdp, pi, 1)
    cpath = tmp_path / "chrono.csv"
    chrono_table_to_csv(chrono, cpath)
    clines = cpath.read_text().strip().splitlines()
    assert clines[0] == "k,x,y,value"
    assert len(clines) == 1 + 2 * 4
