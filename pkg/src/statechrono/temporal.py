"""Endpoint-conditioned discounted returns and the two range constraints.

conditioned_return computes E[sum_{t=0..k} gamma^t r_t | s_0 = x, s_k = y]
under a policy, by forward occupancies and backward reach probabilities; the
sum includes both endpoints. The two check_* helpers score the lower-bound
(any-policy return never exceeds the measurement) and upper-bound (the
measurement is capped by the detour through a second rollout) constraints.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import (TabularMdp, Policy, policy_reward, policy_transition,
                  random_policy, value_iteration)


class UnreachableEndpointError(ValueError):
    """The conditioning event P(s_k = y | s_0 = x) has probability zero."""


@dataclass(frozen=True)
class ConditionedReturn:
    value: float
    endpoint_prob: float
    k: int


@dataclass(frozen=True)
class LowerBoundCheck:
    satisfied: bool
    gap: float


@dataclass(frozen=True)
class UpperBoundCheck:
    satisfied: bool
    slack: float


def endpoint_probability(mdp: TabularMdp, pi: Policy, x: int, y: int,
                         k: int) -> float:
    """P(s_k = y | s_0 = x) under the policy's state chain."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    p = policy_transition(mdp, pi)
    alpha = np.zeros(mdp.n_states)
    alpha[x] = 1.0
    for _ in range(k):
        alpha = alpha @ p
    return float(alpha[y])


def conditioned_return(mdp: TabularMdp, pi: Policy, x: int, y: int,
                       k: int) -> ConditionedReturn:
    """Endpoint-conditioned discounted return, inclusive of t = 0 and t = k.

    Uses forward occupancies alpha_t and backward reach probabilities beta_t:
    alpha_t(s) * beta_t(s) = P(s_t = s, s_k = y | s_0 = x), so each term is
    the exact conditional expectation of the policy-expected state reward.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    p = policy_transition(mdp, pi)
    r = policy_reward(mdp, pi)
    n = mdp.n_states
    alphas = np.zeros((k + 1, n))
    alphas[0, x] = 1.0
    for t in range(1, k + 1):
        alphas[t] = alphas[t - 1] @ p
    betas = np.zeros((k + 1, n))
    betas[k, y] = 1.0
    for t in range(k - 1, -1, -1):
        betas[t] = p @ betas[t + 1]
    z = float(alphas[k, y])
    if z <= 0.0:
        raise UnreachableEndpointError(
            f"unreachable endpoint: P(s_{k} = {y} | s_0 = {x}) = 0")
    value = 0.0
    disc = 1.0
    for t in range(k + 1):
        value += disc * float(np.dot(alphas[t] * betas[t], r))
        disc *= mdp.gamma
    return ConditionedReturn(value / z, z, k)


def m_star(mdp: TabularMdp, x: int, y: int, k: int,
           tol: float = 1e-10) -> ConditionedReturn:
    """Conditioned return under the value-iteration greedy policy."""
    _, greedy = value_iteration(mdp, tol)
    return conditioned_return(mdp, greedy, x, y, k)


def check_lower_bound(mdp: TabularMdp, pi: Policy, x: int, y: int, k: int,
                      m_value: float) -> LowerBoundCheck:
    """gap = m_value - conditioned return under pi; satisfied iff the
    conditioned return does not exceed m_value beyond 1e-9."""
    ret = conditioned_return(mdp, pi, x, y, k)
    gap = float(m_value) - ret.value
    return LowerBoundCheck(gap >= -1e-9, gap)


def check_upper_bound(m_xy: float, d_xi_yi: float, d_xj_yj: float,
                      m_yy: float) -> UpperBoundCheck:
    """slack = d_xi_yi + |m_yy| + d_xj_yj - |m_xy|; satisfied iff the longer
    path through the second rollout bounds |m_xy| within 1e-9."""
    if d_xi_yi < 0.0 or d_xj_yj < 0.0:
        raise ValueError("distances must be non-negative")
    slack = d_xi_yi + abs(m_yy) + d_xj_yj - abs(m_xy)
    return UpperBoundCheck(slack >= -1e-9, slack)


@dataclass(frozen=True)
class LowerBoundSweep:
    """Empirical any-policy dominance report for one (x, y, k) triple."""

    m_star_value: float
    n_policies: int
    n_evaluated: int
    violation_rate: float
    max_violation: float


def lower_bound_violation_sweep(mdp: TabularMdp, x: int, y: int, k: int,
                                n_policies: int, seed: int,
                                tol: float = 1e-9,
                                m_value: float | None = None) -> LowerBoundSweep:
    """Rate at which random-policy conditioned returns exceed the greedy
    policy's value by more than tol. Policies under which the endpoint is
    unreachable are skipped; reported, never asserted. Pass m_value to reuse
    a precomputed greedy-policy value."""
    m_val = m_star(mdp, x, y, k).value if m_value is None else float(m_value)
    n_eval = 0
    n_viol = 0
    max_viol = 0.0
    for p_idx in range(n_policies):
        pi = random_policy(mdp, seed + p_idx)
        try:
            ret = conditioned_return(mdp, pi, x, y, k)
        except UnreachableEndpointError:
            continue
        n_eval += 1
        excess = ret.value - m_val
        if excess > tol:
            n_viol += 1
            max_viol = max(max_viol, excess)
    rate = n_viol / n_eval if n_eval else 0.0
    return LowerBoundSweep(m_val, n_policies, n_eval, rate, max_viol)
