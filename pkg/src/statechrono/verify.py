"""Self-contained property suites with independent oracles.

Each suite checks one family of invariants against an implementation-independent
reference: distance axioms on large random draws, operator convergence against
the contraction bound, the transport solver against brute-force enumeration of
transport-polytope vertices, the finite-step recursions against explicit path
enumeration, and every training loss against central finite differences.

The `check` CLI subcommand runs all suites; the acceptance tests assert them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import distances, grad, trainer
from .exact_metrics import (bisim_fixed_point, chrono_fixed_point,
                            contraction_iteration_bound, mico_fixed_point,
                            wasserstein1)
from .mdp import (TabularMdp, policy_reward, policy_transition, random_mdp,
                  random_policy, sample_chrono_batch, sample_trajectory,
                  uniform_policy)
from .temporal import UnreachableEndpointError, conditioned_return
from .trainer import (TrainerConfig, loss_components, loss_low, loss_phi,
                      loss_psi, loss_up)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    n_checks: int
    detail: str
    rows: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# independent oracles


def transport_polytope_minimum(mu, nu, cost) -> float:
    """Brute-force optimal transport: enumerate every spanning tree of the
    bipartite support graph (each polytope vertex is the flow of at least one
    tree), solve each by leaf elimination, and take the cheapest feasible one."""
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    m, n = len(mu), len(nu)
    edges = [(i, m + j) for i in range(m) for j in range(n)]
    n_nodes = m + n
    need = n_nodes - 1
    parent = list(range(n_nodes))

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    best = [np.inf]
    chosen = []

    def solve_tree():
        adj = [[] for _ in range(n_nodes)]
        for eid in chosen:
            u, v = edges[eid]
            adj[u].append((eid, v))
            adj[v].append((eid, u))
        balance = list(mu) + [-x for x in nu]
        deg = [len(a) for a in adj]
        alive_edge = {eid: True for eid in chosen}
        alive_node = [True] * n_nodes
        stack = [v for v in range(n_nodes) if deg[v] == 1]
        total = 0.0
        feasible = True
        processed = 0
        while stack and processed < need:
            v = stack.pop()
            if not alive_node[v] or deg[v] != 1:
                continue
            eid = next(e for e, _ in adj[v] if alive_edge[e])
            u = next(w for e, w in adj[v] if e == eid)
            flow = balance[v] if v < m else -balance[v]
            if flow < -1e-12:
                feasible = False
                break
            i, j = edges[eid]
            total += flow * cost[i, j - m]
            balance[u] += balance[v]
            alive_edge[eid] = False
            alive_node[v] = False
            deg[v] -= 1
            deg[u] -= 1
            adj[u] = [(e, w) for e, w in adj[u] if alive_edge[e]]
            adj[v] = []
            if deg[u] == 1:
                stack.append(u)
            processed += 1
        if feasible and total < best[0]:
            best[0] = total

    def rec(start, picked):
        if picked == need:
            solve_tree()
            return
        if len(edges) - start < need - picked:
            return
        for idx in range(start, len(edges)):
            u, v = edges[idx]
            ru, rv = find(u), find(v)
            if ru == rv:
                continue
            parent[ru] = rv
            chosen.append(idx)
            rec(idx + 1, picked + 1)
            chosen.pop()
            parent[ru] = ru

    rec(0, 0)
    if not np.isfinite(best[0]):
        raise RuntimeError("no feasible transport vertex found")
    return float(best[0])


def path_marginals(p: np.ndarray, start: int, steps: int) -> np.ndarray:
    """State distribution after `steps` steps by explicit path enumeration."""
    n = p.shape[0]
    out = np.zeros(n)

    def rec(s, t, prob):
        if t == steps:
            out[s] += prob
            return
        row = p[s]
        for s2 in range(n):
            if row[s2] > 0.0:
                rec(s2, t + 1, prob * row[s2])

    rec(start, 0, 1.0)
    return out


def chrono_bruteforce(mdp, pi, K: int) -> np.ndarray:
    """Finite-step chrono tables from path-enumerated marginals of two
    independent chains."""
    p = policy_transition(mdp, pi)
    r = policy_reward(mdp, pi)
    gap = np.abs(r[:, None] - r[None, :])
    n = mdp.n_states
    margs = [[path_marginals(p, s, t) for t in range(max(K, 1))] for s in range(n)]
    values = np.zeros((K + 1, n, n))
    for k in range(1, K + 1):
        for x in range(n):
            for y in range(n):
                total = 0.0
                for t in range(k):
                    joint = np.outer(margs[x][t], margs[y][t])
                    total += (mdp.gamma ** t) * float((joint * gap).sum())
                values[k, x, y] = total
    return values


def conditioned_return_bruteforce(mdp, pi, x: int, y: int, k: int):
    """Exhaustive path enumeration; returns (value, endpoint_prob) or None
    when no path reaches y in k steps."""
    p = policy_transition(mdp, pi)
    r = policy_reward(mdp, pi)
    gamma = mdp.gamma
    acc = {"w": 0.0, "wv": 0.0}

    def rec(s, t, prob, val):
        val = val + (gamma ** t) * r[s]
        if t == k:
            if s == y:
                acc["w"] += prob
                acc["wv"] += prob * val
            return
        row = p[s]
        for s2 in range(len(row)):
            if row[s2] > 0.0:
                rec(s2, t + 1, prob * row[s2], val)

    rec(x, 0, 1.0, 0.0)
    if acc["w"] == 0.0:
        return None
    return acc["wv"] / acc["w"], acc["w"]


def mico_operator_naive(mdp, pi, d: np.ndarray) -> np.ndarray:
    """Quadruple-loop application of the sample-coupling update."""
    p = policy_transition(mdp, pi)
    r = policy_reward(mdp, pi)
    n = mdp.n_states
    out = np.zeros((n, n))
    for x in range(n):
        for y in range(n):
            exp = 0.0
            for x2 in range(n):
                for y2 in range(n):
                    exp += p[x, x2] * p[y, y2] * d[x2, y2]
            out[x, y] = abs(r[x] - r[y]) + mdp.gamma * exp
    return out


# ---------------------------------------------------------------------------
# suites


def diffuse_metric_suite(n_triples: int = 100_000, dim: int = 16,
                         seed: int = 9001) -> SuiteResult:
    """Non-negativity, exact symmetry, triangle inequality within 1e-9, and
    self-distance equal to the norm within 1e-12, on random triples."""
    rng = np.random.default_rng([seed, 1])
    a, b, c = rng.uniform(-10.0, 10.0, (3, n_triples, dim))
    dab = distances.d_hat_rows(a, b)
    dba = distances.d_hat_rows(b, a)
    dbc = distances.d_hat_rows(b, c)
    dac = distances.d_hat_rows(a, c)
    self_err = float(np.max(np.abs(distances.d_hat_rows(a, a)
                                   - np.linalg.norm(a, axis=-1))))
    tri_slack = float(np.min(dab + dbc - dac))
    failures = []
    if not (dab >= 0.0).all():
        failures.append("negativity")
    if not (dab == dba).all():
        failures.append("symmetry")
    if tri_slack < -1e-9:
        failures.append(f"triangle slack {tri_slack:.3e}")
    if self_err > 1e-12:
        failures.append(f"self-distance error {self_err:.3e}")
    detail = (f"{n_triples} triples, min triangle slack {tri_slack:.3e}, "
              f"max self-distance error {self_err:.3e}")
    if failures:
        detail += "; FAILED: " + ", ".join(failures)
    return SuiteResult("diffuse-metric", not failures, 4 * n_triples, detail)


def iqe_suite(n_triples: int = 100_000, k: int = 4, l: int = 4,
              seed: int = 9002) -> SuiteResult:
    """Zero self-distance, non-negativity, triangle inequality within 1e-9,
    and at least one strongly asymmetric pair."""
    shape = distances.IqeShape(k, l, alpha=0.5)
    rng = np.random.default_rng([seed, 2])
    a, b, c = rng.uniform(-10.0, 10.0, (3, n_triples, k * l))
    dab = distances.iqe_rows(a, b, shape)
    dba = distances.iqe_rows(b, a, shape)
    dbc = distances.iqe_rows(b, c, shape)
    dac = distances.iqe_rows(a, c, shape)
    dself = distances.iqe_rows(a, a, shape)
    tri_slack = float(np.min(dab + dbc - dac))
    max_asym = float(np.max(np.abs(dab - dba)))
    failures = []
    if not (dab >= 0.0).all():
        failures.append("negativity")
    if not (dself == 0.0).all():
        failures.append("self-distance")
    if tri_slack < -1e-9:
        failures.append(f"triangle slack {tri_slack:.3e}")
    if max_asym <= 0.1:
        failures.append(f"no asymmetry witness (max {max_asym:.3e})")
    detail = (f"{n_triples} triples, min triangle slack {tri_slack:.3e}, "
              f"max asymmetry {max_asym:.3f}")
    if failures:
        detail += "; FAILED: " + ", ".join(failures)
    return SuiteResult("iqe-quasimetric", not failures, 4 * n_triples, detail)


def contraction_suite(n_mdps: int = 50, seed: int = 9003,
                      tol: float = 1e-10) -> SuiteResult:
    """Both iterated operators: per-step gamma-contraction of the change
    sequence, residual at tolerance, and convergence within the derived
    iteration bound, on seeded random MDPs."""
    rng = np.random.default_rng([seed, 3])
    gammas = (0.5, 0.9, 0.95)
    rows = []
    failures = []
    for i in range(n_mdps):
        n = int(rng.integers(3, 21))
        gamma = gammas[i % len(gammas)]
        mdp_seed = int(rng.integers(2 ** 31))
        pi_seed = int(rng.integers(2 ** 31))
        mdp = random_mdp(n, 3, gamma, seed=mdp_seed, max_support=4)
        pi = random_policy(mdp, pi_seed)
        r = policy_reward(mdp, pi)
        gap0 = float(np.max(np.abs(r[:, None] - r[None, :])))
        bound = contraction_iteration_bound(gamma, gap0, tol)
        for op_name, fn in (("mico", mico_fixed_point), ("bisim", bisim_fixed_point)):
            table = fn(mdp, pi, tol)
            ch = table.step_changes
            contraction_ok = bool(np.all(ch[1:] <= gamma * ch[:-1] + 1e-12))
            sym_err = float(np.max(np.abs(table.values - table.values.T)))
            ok = (contraction_ok and table.residual <= tol
                  and table.iterations <= bound
                  and sym_err <= 1e-10 and float(table.values.min()) >= 0.0)
            if not ok:
                failures.append(f"instance {i} ({op_name}, n={n}, gamma={gamma})")
            rows.append({
                "instance": i, "operator": op_name, "n": n, "gamma": gamma,
                "iterations": table.iterations, "residual": table.residual,
                "bound": bound, "contraction_ok": contraction_ok,
            })
    detail = f"{n_mdps} MDPs x 2 operators, tol {tol:g}"
    if failures:
        detail += "; FAILED: " + ", ".join(failures[:4])
    return SuiteResult("contraction-convergence", not failures,
                       2 * n_mdps, detail, rows)


def transport_oracle_suite(n_instances: int = 200,
                           seed: int = 9004) -> SuiteResult:
    """Solver value equals brute-force vertex enumeration within 1e-9."""
    rng = np.random.default_rng([seed, 4])
    worst = 0.0
    failures = 0
    for _ in range(n_instances):
        m = int(rng.integers(1, 5))
        n = int(rng.integers(1, 5))
        mu = rng.random(m) + 0.05
        mu /= mu.sum()
        nu = rng.random(n) + 0.05
        nu /= nu.sum()
        cost = rng.uniform(0.0, 5.0, (m, n))
        got = wasserstein1(mu, nu, cost)
        want = transport_polytope_minimum(mu, nu, cost)
        err = abs(got - want)
        worst = max(worst, err)
        if err > 1e-9:
            failures += 1
    detail = f"{n_instances} instances, worst abs error {worst:.3e}"
    if failures:
        detail += f"; FAILED on {failures}"
    return SuiteResult("transport-oracle", failures == 0, n_instances, detail)


def chrono_oracle_suite(n_instances: int = 20, K: int = 4,
                        seed: int = 9005) -> SuiteResult:
    """Finite-step tables equal path-pair enumeration to 1e-10, and the gap
    to the converged coupling table obeys gamma^K * R_range / (1 - gamma)."""
    rng = np.random.default_rng([seed, 5])
    worst = 0.0
    failures = []
    for i in range(n_instances):
        n = int(rng.integers(2, 6))
        gamma = float(rng.choice([0.5, 0.9, 0.95]))
        mdp = random_mdp(n, 2, gamma, seed=int(rng.integers(2 ** 31)),
                         max_support=3)
        pi = random_policy(mdp, int(rng.integers(2 ** 31)))
        table = chrono_fixed_point(mdp, pi, K)
        brute = chrono_bruteforce(mdp, pi, K)
        err = float(np.max(np.abs(table.values - brute)))
        worst = max(worst, err)
        if err > 1e-10:
            failures.append(f"instance {i} path-pair error {err:.3e}")
        if float(np.abs(table.values[0]).max()) != 0.0:
            failures.append(f"instance {i} nonzero base case")
        r = policy_reward(mdp, pi)
        r_range = float(np.max(np.abs(r[:, None] - r[None, :])))
        mico = mico_fixed_point(mdp, pi, tol=1e-12)
        long_table = chrono_fixed_point(mdp, pi, 20)
        for kk in range(21):
            gap = float(np.max(np.abs(long_table.values[kk] - mico.values)))
            bound = (gamma ** kk) * r_range / (1.0 - gamma)
            if gap > bound + 1e-9:
                failures.append(f"instance {i} K={kk} gap {gap:.3e} > {bound:.3e}")
    detail = f"{n_instances} instances, worst path-pair error {worst:.3e}"
    if failures:
        detail += "; FAILED: " + ", ".join(failures[:4])
    return SuiteResult("chrono-oracle", not failures, n_instances * (K + 21), detail)


def conditioned_return_oracle_suite(n_instances: int = 20, k_max: int = 5,
                                    seed: int = 9006) -> SuiteResult:
    """Forward-backward DP equals exhaustive path enumeration to 1e-10; the
    three-state deterministic chain evaluates to 2.75 exactly."""
    rng = np.random.default_rng([seed, 6])
    worst = 0.0
    n_checks = 0
    failures = []
    for i in range(n_instances):
        n = int(rng.integers(2, 6))
        gamma = float(rng.choice([0.5, 0.9]))
        mdp = random_mdp(n, 2, gamma, seed=int(rng.integers(2 ** 31)),
                         max_support=3)
        pi = random_policy(mdp, int(rng.integers(2 ** 31)))
        k = int(rng.integers(0, k_max + 1))
        for x in range(n):
            for y in range(n):
                brute = conditioned_return_bruteforce(mdp, pi, x, y, k)
                n_checks += 1
                if brute is None:
                    try:
                        conditioned_return(mdp, pi, x, y, k)
                        failures.append(f"instance {i} ({x},{y},k={k}) "
                                        "missing unreachable error")
                    except UnreachableEndpointError:
                        pass
                    continue
                got = conditioned_return(mdp, pi, x, y, k)
                err = abs(got.value - brute[0])
                perr = abs(got.endpoint_prob - brute[1])
                worst = max(worst, err)
                if err > 1e-10 or perr > 1e-12:
                    failures.append(f"instance {i} ({x},{y},k={k}) error {err:.3e}")
    chain = TabularMdp(
        transition=[[[0, 1, 0]], [[0, 0, 1]], [[0, 0, 1]]],
        reward=[[1.0], [2.0], [3.0]],
        gamma=0.5)
    chain_pi = uniform_policy(chain)
    chain_val = conditioned_return(chain, chain_pi, 0, 2, 2).value
    n_checks += 1
    if chain_val != 2.75:
        failures.append(f"chain value {chain_val!r} != 2.75")
    detail = f"{n_checks} pairs, worst DP-vs-paths error {worst:.3e}"
    if failures:
        detail += "; FAILED: " + ", ".join(failures[:4])
    return SuiteResult("conditioned-return-oracle", not failures, n_checks, detail)


def _gradient_setup(seed: int):
    """Small fixed problem shared by all gradient checks."""
    mdp = random_mdp(5, 2, 0.9, seed=seed, max_support=3)
    pi = uniform_policy(mdp)
    trajs = [sample_trajectory(mdp, pi, s % 5, 40, seed + s) for s in range(4)]
    batch = sample_chrono_batch(trajs, 6, (1, 5), mdp.gamma, seed)
    rng = np.random.default_rng([seed, 7])
    target_phi = rng.normal(0.0, 0.8, (5, 8))
    perm_pool = rng.permutation(12)
    perm_pair = rng.permutation(6)
    return mdp, batch, target_phi, perm_pool, perm_pair


def _draw_params(rng, n_states=5, n_dim=8, hidden=8):
    return {
        "phi": rng.normal(0.0, 0.8, (n_states, n_dim)),
        "psi_w1": rng.normal(0.0, 0.5, (2 * n_dim, hidden)),
        "psi_b1": rng.normal(0.0, 0.2, hidden),
        "psi_w2": rng.normal(0.0, 0.5, (hidden, n_dim)),
        "psi_b2": rng.normal(0.0, 0.2, n_dim),
        "m_raw_alpha": rng.normal(0.0, 0.5, ()),
    }


def _loss_builders(batch, target_phi, gamma, perm_pool, perm_pair, k, l):
    return {
        "loss_phi": lambda lv: loss_phi(batch, lv, target_phi, gamma, perm_pool),
        "loss_psi": lambda lv: loss_psi(batch, lv, target_phi, gamma, perm_pair),
        "loss_low": lambda lv: loss_low(batch, lv, k, l),
        "loss_up": lambda lv: loss_up(batch, lv, k, l, perm_pair),
        "total": lambda lv: loss_components(batch, lv, target_phi, gamma,
                                            perm_pool, perm_pair, k, l)["total"],
    }


def _stop_gradient_probes(batch, target_phi, gamma, perm_pair, rng) -> list:
    """Bootstrap branches must carry values but no gradient."""
    failures = []
    # x * sg(x) at x = 3 differentiates to x, not 2x
    x = grad.leaf(np.array(3.0))
    y = grad.multiply(x, grad.stop_gradient(x))
    grad.backward(y)
    if abs(float(x.grad) - 3.0) > 1e-12:
        failures.append(f"x*sg(x) gradient {float(x.grad)!r} != 3")
    # blocked pair-embedding bootstrap: gradients match the frozen-target
    # variant and differ from the unblocked one
    values = _draw_params(rng)

    def grads_of(build):
        leaves = {n: grad.leaf(v.copy()) for n, v in values.items()}
        grad.backward(build(leaves))
        return {n: (leaves[n].grad if leaves[n].grad is not None
                    else np.zeros_like(values[n])) for n in values}

    def build_frozen(lv):
        ui = grad.gather_rows(lv["phi"], batch.x_i)
        uj = grad.gather_rows(lv["phi"], batch.x_j)
        pair = trainer.psi_node(lv, ui, uj)
        d_online = trainer.d_hat_node(pair, grad.gather_rows(pair, perm_pair))
        reward_gap = np.abs(batch.r_i - batch.r_i[perm_pair])
        lv_vals = {n: grad.leaf(values[n]) for n in values}
        pair_next = trainer.psi_node(lv_vals, grad.constant(target_phi[batch.x_i1]),
                                     grad.constant(target_phi[batch.x_j]))
        boot = trainer.d_hat_node(pair_next, grad.gather_rows(pair_next, perm_pair))
        resid = grad.subtract(d_online,
                              grad.constant(reward_gap + gamma * boot.value))
        return grad.mean(grad.multiply(resid, resid))

    def build_unblocked(lv):
        ui = grad.gather_rows(lv["phi"], batch.x_i)
        uj = grad.gather_rows(lv["phi"], batch.x_j)
        pair = trainer.psi_node(lv, ui, uj)
        d_online = trainer.d_hat_node(pair, grad.gather_rows(pair, perm_pair))
        reward_gap = np.abs(batch.r_i - batch.r_i[perm_pair])
        pair_next = trainer.psi_node(lv, grad.constant(target_phi[batch.x_i1]),
                                     grad.constant(target_phi[batch.x_j]))
        boot = trainer.d_hat_node(pair_next, grad.gather_rows(pair_next, perm_pair))
        resid = grad.subtract(
            d_online, grad.add(grad.constant(reward_gap),
                               grad.scalar_multiply(boot, gamma)))
        return grad.mean(grad.multiply(resid, resid))

    actual = grads_of(lambda lv: loss_psi(batch, lv, target_phi, gamma, perm_pair))
    frozen = grads_of(build_frozen)
    unblocked = grads_of(build_unblocked)
    for name in values:
        if not np.allclose(actual[name], frozen[name], rtol=0, atol=1e-12):
            failures.append(f"blocked bootstrap leaks gradient into {name}")
    leak_diff = max(float(np.max(np.abs(actual[n] - unblocked[n])))
                    for n in ("psi_w1", "psi_w2"))
    if leak_diff == 0.0:
        failures.append("unblocked control produced identical gradients")
    return failures


def gradient_suite(n_draws: int = 100, seed: int = 9007) -> SuiteResult:
    """Every loss matches central finite differences (rel. err <= 1e-4,
    h = 1e-5) on random parameter draws away from kinks, and the bootstrap
    branches are gradient-blocked."""
    mdp, batch, target_phi, perm_pool, perm_pair = _gradient_setup(seed)
    k, l = 4, 2
    builders = _loss_builders(batch, target_phi, mdp.gamma, perm_pool,
                              perm_pair, k, l)
    rng = np.random.default_rng([seed, 8])
    worst = 0.0
    checked = 0
    skipped = 0
    failures = []
    attempts = 0
    while checked < n_draws and attempts < 4 * n_draws:
        attempts += 1
        values = _draw_params(rng)
        results = {}
        near_kink = False
        for name, build in builders.items():
            res = grad.gradient_check(build, values, rng, n_coords=4)
            if res is None:
                near_kink = True
                break
            results[name] = res[0]
        if near_kink:
            skipped += 1
            continue
        checked += 1
        for name, rel in results.items():
            worst = max(worst, rel)
            if rel > 1e-4:
                failures.append(f"{name} rel err {rel:.3e} at draw {checked}")
    if checked < n_draws:
        failures.append(f"only {checked}/{n_draws} usable draws")
    failures.extend(_stop_gradient_probes(batch, target_phi, mdp.gamma,
                                          perm_pair, rng))
    detail = (f"{checked} draws x 5 losses, worst rel err {worst:.3e}, "
              f"{skipped} kink-adjacent draws skipped")
    if failures:
        detail += "; FAILED: " + ", ".join(failures[:4])
    return SuiteResult("gradient-suite", not failures, checked * 5, detail)


ALL_SUITES = (
    diffuse_metric_suite,
    iqe_suite,
    contraction_suite,
    transport_oracle_suite,
    chrono_oracle_suite,
    conditioned_return_oracle_suite,
    gradient_suite,
)


def run_all() -> list[SuiteResult]:
    return [suite() for suite in ALL_SUITES]
