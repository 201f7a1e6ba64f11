"""Exact fixed points of the behavioral-metric operators on tabular MDPs.

Three operators, all contractions with modulus gamma:
  * bisim: reward gap + gamma * 1-Wasserstein between next-state rows;
  * mico: reward gap + gamma * expected distance between independently drawn
    next states (the Lukaszyk-Karmowski coupling, P d P^T in matrix form);
  * chrono: the mico recursion truncated at a remaining-step budget, with the
    zero-step base case identically 0.

The Wasserstein solver is a successive-shortest-path min-cost flow on the
bipartite transport graph. Arc costs are scaled to int64 so path comparisons
are exact; the scale backs off from 10^12 only if the costs would overflow.
Kernels are numba-compiled when numba is available (the bisimulation loop
solves one transport problem per state pair per iteration) and run as plain
Python otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TabularMdp, Policy, policy_reward, policy_transition, validate

COST_SCALE = 10 ** 12
_INT_LIMIT = float(2 ** 62)
DEFAULT_TOL = 1e-10
_MASS_EPS = 1e-15
_INF_I = np.int64(2 ** 62)


class ConvergenceError(RuntimeError):
    """Raised when a fixed-point loop exhausts max_iter; carries the last iterate."""

    def __init__(self, message: str, last_table: np.ndarray):
        super().__init__(message)
        self.last_table = last_table


@dataclass(frozen=True)
class MetricTable:
    """Exact metric values with the iteration count, the final sup-norm
    change (residual), and the per-iteration change history."""

    values: np.ndarray
    iterations: int
    residual: float
    step_changes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "step_changes",
                           np.asarray(self.step_changes, dtype=np.float64))


@dataclass(frozen=True)
class ChronoMetricTable:
    """values[k][x][y] for remaining-step budgets k = 0..K; values[0] == 0."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    @property
    def max_steps(self) -> int:
        return self.values.shape[0] - 1


def contraction_iteration_bound(gamma: float, initial_gap: float, tol: float) -> int:
    """Iterations sufficient for a gamma-contraction started at the zero
    table to reach a sup-norm change of tol, plus slack."""
    if gamma <= 0.0 or initial_gap <= tol:
        return 1 + 8
    return int(np.ceil(np.log(tol * (1.0 - gamma) / initial_gap) / np.log(gamma))) + 8


def effective_cost_scale(max_cost: float, path_len: int) -> int:
    """Largest power-of-ten scale <= 10^12 keeping integer path costs within
    int64 range."""
    scale = COST_SCALE
    while scale > 1 and (max_cost + 1.0) * scale * path_len >= _INT_LIMIT:
        scale //= 10
    return scale


def _ssp_plan_impl(supply, demand, cost):
    """Min-cost transport plan by successive shortest augmenting paths.

    supply/demand are positive float arrays; cost is an int64 matrix, so
    path-cost comparisons are exact. Each round relaxes the residual graph to
    convergence (Bellman-Ford; residual arcs carry negative costs, but the
    maintained flow is always optimal for its throughput so there is no
    negative cycle), then augments along the cheapest path from the remaining
    supplies to the nearest remaining demand. Returns the dense flow plan.
    """
    m = supply.shape[0]
    n = demand.shape[0]
    rem_s = supply.copy()
    rem_d = demand.copy()
    flow = np.zeros((m, n))
    dist_u = np.empty(m, np.int64)
    dist_v = np.empty(n, np.int64)
    parent_u = np.empty(m, np.int64)
    parent_v = np.empty(n, np.int64)
    fwd_i = np.empty(m + n + 2, np.int64)
    fwd_j = np.empty(m + n + 2, np.int64)
    bwd_i = np.empty(m + n + 2, np.int64)
    bwd_j = np.empty(m + n + 2, np.int64)
    guard = 4 * (m * n + m + n) + 64
    while True:
        total_s = 0.0
        for i in range(m):
            total_s += rem_s[i]
        total_d = 0.0
        for j in range(n):
            total_d += rem_d[j]
        if total_s <= 1e-12 or total_d <= 1e-12:
            break
        guard -= 1
        if guard < 0:
            raise RuntimeError("transport solver failed to terminate")
        for i in range(m):
            dist_u[i] = 0 if rem_s[i] > _MASS_EPS else _INF_I
            parent_u[i] = -1
        for j in range(n):
            dist_v[j] = _INF_I
            parent_v[j] = -1
        rounds = 0
        changed = True
        while changed:
            rounds += 1
            if rounds > m + n + 4:
                raise RuntimeError("negative cycle in transport residual graph")
            changed = False
            for i in range(m):
                du = dist_u[i]
                if du >= _INF_I:
                    continue
                for j in range(n):
                    nd = du + cost[i, j]
                    if nd < dist_v[j]:
                        dist_v[j] = nd
                        parent_v[j] = i
                        changed = True
            for i in range(m):
                di = dist_u[i]
                for j in range(n):
                    if flow[i, j] > _MASS_EPS and dist_v[j] < _INF_I:
                        nd = dist_v[j] - cost[i, j]
                        if nd < di:
                            di = nd
                            parent_u[i] = j
                            changed = True
                dist_u[i] = di
        target = -1
        best = _INF_I
        for j in range(n):
            if rem_d[j] > _MASS_EPS and dist_v[j] < best:
                best = dist_v[j]
                target = j
        if target < 0:
            raise RuntimeError("transport graph disconnected; inputs infeasible")
        # trace the alternating path back to an initial source: forward arcs
        # gain flow, the interleaved residual arcs lose it
        n_fwd = 0
        n_bwd = 0
        j = target
        start = -1
        while start < 0:
            if n_fwd + n_bwd > m + n:
                raise RuntimeError("transport path trace failed")
            i = parent_v[j]
            fwd_i[n_fwd] = i
            fwd_j[n_fwd] = j
            n_fwd += 1
            if parent_u[i] == -1:
                start = i
            else:
                j = parent_u[i]
                bwd_i[n_bwd] = i
                bwd_j[n_bwd] = j
                n_bwd += 1
        bottleneck = rem_s[start]
        if rem_d[target] < bottleneck:
            bottleneck = rem_d[target]
        for t in range(n_bwd):
            f = flow[bwd_i[t], bwd_j[t]]
            if f < bottleneck:
                bottleneck = f
        for t in range(n_fwd):
            flow[fwd_i[t], fwd_j[t]] += bottleneck
        for t in range(n_bwd):
            flow[bwd_i[t], bwd_j[t]] -= bottleneck
            if flow[bwd_i[t], bwd_j[t]] < _MASS_EPS:
                flow[bwd_i[t], bwd_j[t]] = 0.0
        rem_s[start] -= bottleneck
        if rem_s[start] < _MASS_EPS:
            rem_s[start] = 0.0
        rem_d[target] -= bottleneck
        if rem_d[target] < _MASS_EPS:
            rem_d[target] = 0.0
    return flow


def _bisim_table_impl(sup_idx, sup_len, sup_mass, d_int, gap, gamma, scale):
    """One bisimulation update over all state pairs: for each (x, y) solve
    the transport problem between the supported next-state rows with the
    current metric as cost."""
    n_states = gap.shape[0]
    s_max = sup_idx.shape[1]
    out = np.zeros((n_states, n_states))
    cost = np.empty((s_max, s_max), np.int64)
    for x in range(n_states):
        mx = sup_len[x]
        for y in range(x, n_states):
            my = sup_len[y]
            for a in range(mx):
                ia = sup_idx[x, a]
                for b in range(my):
                    cost[a, b] = d_int[ia, sup_idx[y, b]]
            plan = _SSP_PLAN(sup_mass[x, :mx], sup_mass[y, :my],
                             cost[:mx, :my])
            total = 0.0
            for a in range(mx):
                for b in range(my):
                    total += plan[a, b] * cost[a, b]
            val = gap[x, y] + gamma * (total / scale)
            out[x, y] = val
            out[y, x] = val
    return out


try:
    from numba import njit as _njit

    _SSP_PLAN = _njit(cache=True)(_ssp_plan_impl)
    _BISIM_TABLE = _njit(cache=True)(_bisim_table_impl)
except ImportError:   # pragma: no cover - numba is a declared dependency
    _SSP_PLAN = _ssp_plan_impl
    _BISIM_TABLE = _bisim_table_impl


def wasserstein1(mu, nu, cost) -> float:
    """Exact 1-Wasserstein value between discrete distributions.

    Solved as a min-cost flow by successive shortest augmenting paths with
    integer-scaled costs; the optimal plan's marginals are verified to 1e-9.
    """
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if mu.ndim != 1 or nu.ndim != 1 or cost.shape != (len(mu), len(nu)):
        raise ValueError(f"shape mismatch: mu {mu.shape}, nu {nu.shape}, "
                         f"cost {cost.shape}")
    if abs(mu.sum() - 1.0) > 1e-9 or abs(nu.sum() - 1.0) > 1e-9:
        raise ValueError("non-normalized inputs: mu and nu must each sum to 1")
    if (mu < 0).any() or (nu < 0).any():
        raise ValueError("non-normalized inputs: negative mass")
    if (cost < 0).any():
        raise ValueError("cost matrix must be non-negative")
    sup_mu = np.flatnonzero(mu > 0.0)
    sup_nu = np.flatnonzero(nu > 0.0)
    if len(sup_mu) > 64 or len(sup_nu) > 64:
        raise ValueError("supports larger than 64 states are not supported")
    supply = mu[sup_mu]
    demand = nu[sup_nu] * (supply.sum() / nu[sup_nu].sum())
    cost_sub = cost[np.ix_(sup_mu, sup_nu)]
    scale = effective_cost_scale(float(cost_sub.max()),
                                 len(sup_mu) + len(sup_nu) + 2)
    cost_int = np.rint(cost_sub * scale).astype(np.int64)
    plan = np.asarray(_SSP_PLAN(supply, demand, cost_int))
    if (np.abs(plan.sum(axis=1) - supply).max() > 1e-9
            or np.abs(plan.sum(axis=0) - demand).max() > 1e-9):
        raise RuntimeError("transport plan marginals infeasible")
    return float((plan * cost_int).sum() / scale)


def _reward_gap(mdp: TabularMdp, pi: Policy) -> np.ndarray:
    r = policy_reward(mdp, pi)
    return np.abs(r[:, None] - r[None, :])


def _padded_supports(p: np.ndarray):
    supports = [np.flatnonzero(p[s] > 0.0) for s in range(p.shape[0])]
    s_max = max(len(s) for s in supports)
    n = p.shape[0]
    sup_idx = np.zeros((n, s_max), dtype=np.int64)
    sup_len = np.array([len(s) for s in supports], dtype=np.int64)
    sup_mass = np.zeros((n, s_max))
    for s, idx in enumerate(supports):
        sup_idx[s, :len(idx)] = idx
        sup_mass[s, :len(idx)] = p[s, idx]
    return sup_idx, sup_len, sup_mass


def _bisim_apply(p, gap, gamma, d, scale):
    sup_idx, sup_len, sup_mass = _padded_supports(p)
    d_int = np.rint(np.asarray(d, dtype=np.float64) * scale).astype(np.int64)
    return np.asarray(_BISIM_TABLE(sup_idx, sup_len, sup_mass, d_int, gap,
                                   gamma, float(scale)))


def bisim_operator(mdp: TabularMdp, pi: Policy, d: np.ndarray) -> np.ndarray:
    """One application of the bisimulation update to a symmetric table d."""
    p = policy_transition(mdp, pi)
    gap = _reward_gap(mdp, pi)
    d = np.asarray(d, dtype=np.float64)
    scale = effective_cost_scale(float(d.max()) if d.size else 0.0,
                                 2 * mdp.n_states + 2)
    return _bisim_apply(p, gap, mdp.gamma, d, scale)


def mico_operator(mdp: TabularMdp, pi: Policy, d: np.ndarray) -> np.ndarray:
    """One application of the sample-coupling update: reward gap plus
    gamma * P d P^T."""
    p = policy_transition(mdp, pi)
    gap = _reward_gap(mdp, pi)
    return gap + mdp.gamma * (p @ np.asarray(d, dtype=np.float64) @ p.T)


def _iterate_to_fixed_point(apply_once, gamma, reward_gap, tol, max_iter, n):
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    gap0 = float(reward_gap.max()) if reward_gap.size else 0.0
    if max_iter is None:
        max_iter = contraction_iteration_bound(gamma, gap0, tol)
    d = np.zeros((n, n))
    changes = []
    for it in range(1, max_iter + 1):
        d_new = apply_once(d)
        delta = float(np.max(np.abs(d_new - d))) if d.size else 0.0
        changes.append(delta)
        d = d_new
        if delta <= tol:
            return MetricTable(d, it, delta, np.asarray(changes))
    raise ConvergenceError(
        f"no convergence to tol={tol} within {max_iter} iterations "
        f"(last change {changes[-1]!r})", d)


def bisim_fixed_point(mdp: TabularMdp, pi: Policy, tol: float = DEFAULT_TOL,
                      max_iter: int | None = None) -> MetricTable:
    """Least fixed point of the bisimulation update, iterated from zeros
    until one more application changes the table by at most tol."""
    validate(mdp)
    p = policy_transition(mdp, pi)
    gap = _reward_gap(mdp, pi)
    gamma = mdp.gamma
    # iterates stay below the geometric bound, so one scale serves the run
    cost_bound = float(gap.max()) / max(1.0 - gamma, 1e-6)
    scale = effective_cost_scale(cost_bound, 2 * mdp.n_states + 2)
    return _iterate_to_fixed_point(
        lambda d: _bisim_apply(p, gap, gamma, d, scale),
        gamma, gap, tol, max_iter, mdp.n_states)


def mico_fixed_point(mdp: TabularMdp, pi: Policy, tol: float = DEFAULT_TOL,
                     max_iter: int | None = None) -> MetricTable:
    """Fixed point of the sample-coupling update (unique by contraction),
    iterated from zeros."""
    validate(mdp)
    p = policy_transition(mdp, pi)
    gap = _reward_gap(mdp, pi)
    return _iterate_to_fixed_point(
        lambda d: gap + mdp.gamma * (p @ d @ p.T),
        mdp.gamma, gap, tol, max_iter, mdp.n_states)


def chrono_fixed_point(mdp: TabularMdp, pi: Policy, K: int) -> ChronoMetricTable:
    """Remaining-step tables of the chronological metric: values[0] = 0 and
    values[k] = reward gap + gamma * P values[k-1] P^T. Exact, no tolerance."""
    validate(mdp)
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    p = policy_transition(mdp, pi)
    gap = _reward_gap(mdp, pi)
    n = mdp.n_states
    values = np.zeros((K + 1, n, n))
    for k in range(1, K + 1):
        values[k] = gap + mdp.gamma * (p @ values[k - 1] @ p.T)
    return ChronoMetricTable(values)


def metric_table_to_csv(values: np.ndarray, path) -> None:
    """(x, y, value) rows with 17 significant digits."""
    import csv
    values = np.asarray(values)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "value"])
        for x in range(values.shape[0]):
            for y in range(values.shape[1]):
                writer.writerow([x, y, f"{values[x, y]:.17g}"])


def chrono_table_to_csv(table: ChronoMetricTable, path) -> None:
    """(k, x, y, value) rows with 17 significant digits."""
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "x", "y", "value"])
        for k in range(table.values.shape[0]):
            for x in range(table.values.shape[1]):
                for y in range(table.values.shape[2]):
                    writer.writerow([k, x, y, f"{table.values[k, x, y]:.17g}"])


def metric_table_to_json_dict(table: MetricTable) -> dict:
    return {
        "values": table.values.tolist(),
        "iterations": table.iterations,
        "residual": table.residual,
    }
