"""Tabular MDPs, policies, rollouts, and the chrono-pair sampler.

States and actions are dense integer indices. All types are immutable after
construction; sampling operations are pure functions of (inputs, seed), each
drawing from its own generator derived from (seed, operation tag).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

PROB_ATOL = 1e-12

# Per-operation stream tags: every sampling call owns an independent,
# reproducible generator regardless of call order or thread layout.
_TAG_TRAJECTORY = 1
_TAG_CHRONO = 2
_TAG_RANDOM_MDP = 3
_TAG_RANDOM_POLICY = 4

# Fixed seed of the bundled 6-state reference MDP used by end-to-end checks.
REFERENCE_MDP_SEED = 7


def _rng(seed: int, tag: int) -> np.random.Generator:
    seed = int(seed)
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([seed, tag])


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP: transition[s][a][s'], reward[s][a], discount gamma < 1."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "transition",
                           _freeze(np.array(self.transition, dtype=np.float64)))
        object.__setattr__(self, "reward",
                           _freeze(np.array(self.reward, dtype=np.float64)))
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class Policy:
    """Per-state action distribution probs[s][a]."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs",
                           _freeze(np.array(self.probs, dtype=np.float64)))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class Trajectory:
    """A rollout of H steps: H+1 states, H actions, H rewards."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        states = _freeze(np.array(self.states, dtype=np.int64))
        actions = _freeze(np.array(self.actions, dtype=np.int64))
        rewards = _freeze(np.array(self.rewards, dtype=np.float64))
        if len(actions) < 1:
            raise ValueError("trajectory must contain at least one step")
        if len(states) != len(actions) + 1 or len(rewards) != len(actions):
            raise ValueError("trajectory lengths inconsistent: "
                             f"{len(states)} states, {len(actions)} actions, "
                             f"{len(rewards)} rewards")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)

    @property
    def horizon(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class ChronoBatch:
    """Sampled (x_i, a_i, r_i, x_{i+1}, x_j, r_j, x_{j+1}) tuples with the
    inclusive discounted reward sum over t = 0..step_gap.

    traj_index/pos_i record where each sample came from so the reward sum can
    be re-derived from its source trajectory.
    """

    x_i: np.ndarray
    x_i1: np.ndarray
    x_j: np.ndarray
    x_j1: np.ndarray
    a_i: np.ndarray
    r_i: np.ndarray
    r_j: np.ndarray
    agg_rew: np.ndarray
    step_gap: np.ndarray
    traj_index: np.ndarray
    pos_i: np.ndarray

    def __post_init__(self):
        for name in ("x_i", "x_i1", "x_j", "x_j1", "a_i", "step_gap",
                     "traj_index", "pos_i"):
            object.__setattr__(self, name,
                               _freeze(np.array(getattr(self, name), dtype=np.int64)))
        for name in ("r_i", "r_j", "agg_rew"):
            object.__setattr__(self, name,
                               _freeze(np.array(getattr(self, name), dtype=np.float64)))

    def __len__(self) -> int:
        return len(self.x_i)


def validate(mdp: TabularMdp) -> None:
    """Check every TabularMdp invariant; raise ValueError naming the first
    violation with its indices."""
    t, r = mdp.transition, mdp.reward
    if t.ndim != 3 or t.shape[0] != t.shape[2]:
        raise ValueError(f"transition table must be [S][A][S], got shape {t.shape}")
    if t.shape[0] < 1 or t.shape[1] < 1:
        raise ValueError(f"need at least one state and one action, got shape {t.shape}")
    if r.shape != t.shape[:2]:
        raise ValueError(f"reward shape {r.shape} does not match transition {t.shape[:2]}")
    if not (0.0 <= mdp.gamma < 1.0):
        raise ValueError(f"discount gamma must lie in [0, 1), got {mdp.gamma}")
    if not np.all(np.isfinite(r)):
        s, a = np.argwhere(~np.isfinite(r))[0]
        raise ValueError(f"reward not finite at state {s}, action {a}")
    bad = (t < 0.0) | (t > 1.0)
    if bad.any():
        s, a, s2 = np.argwhere(bad)[0]
        raise ValueError(f"probability entry out of [0, 1] at "
                         f"state {s}, action {a}, next state {s2}: {t[s, a, s2]}")
    sums = t.sum(axis=2)
    off = np.abs(sums - 1.0) > PROB_ATOL
    if off.any():
        s, a = np.argwhere(off)[0]
        raise ValueError(f"transition row sum is {sums[s, a]!r} "
                         f"for state {s}, action {a} (expected 1)")


def validate_policy(pi: Policy, mdp: TabularMdp | None = None) -> None:
    """Check Policy invariants, and shape agreement against mdp if given."""
    p = pi.probs
    if p.ndim != 2:
        raise ValueError(f"policy table must be [S][A], got shape {p.shape}")
    if mdp is not None and p.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {p.shape} does not match MDP "
                         f"({mdp.n_states}, {mdp.n_actions})")
    if ((p < 0.0) | (p > 1.0)).any():
        s, a = np.argwhere((p < 0.0) | (p > 1.0))[0]
        raise ValueError(f"policy probability out of [0, 1] at state {s}, action {a}")
    sums = p.sum(axis=1)
    off = np.abs(sums - 1.0) > PROB_ATOL
    if off.any():
        s = np.argwhere(off)[0][0]
        raise ValueError(f"policy row sum is {sums[s]!r} for state {s} (expected 1)")


def value_iteration(mdp: TabularMdp, tol: float = 1e-10) -> tuple[np.ndarray, Policy]:
    """Bellman-optimality iteration.

    Returns (values, greedy) where the values carry a sup-norm Bellman
    residual of at most tol and greedy is the deterministic argmax policy
    (ties broken toward the lowest action index).
    """
    validate(mdp)
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    g = mdp.gamma
    r_max = float(np.max(np.abs(mdp.reward)))
    if g == 0.0 or r_max <= tol:
        cap = 2
    else:
        cap = int(np.ceil(np.log(tol * (1.0 - g) / r_max) / np.log(g))) + 8
    v = np.zeros(mdp.n_states)
    for _ in range(max(cap, 1)):
        q = mdp.reward + g * np.einsum("sat,t->sa", mdp.transition, v)
        v_new = q.max(axis=1)
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta <= tol:
            break
    q = mdp.reward + g * np.einsum("sat,t->sa", mdp.transition, v)
    greedy = np.argmax(q, axis=1)
    probs = np.zeros((mdp.n_states, mdp.n_actions))
    probs[np.arange(mdp.n_states), greedy] = 1.0
    return v, Policy(probs)


def policy_reward(mdp: TabularMdp, pi: Policy) -> np.ndarray:
    """Expected one-step reward per state under pi."""
    validate_policy(pi, mdp)
    return np.einsum("sa,sa->s", pi.probs, mdp.reward)


def policy_transition(mdp: TabularMdp, pi: Policy) -> np.ndarray:
    """State-to-state transition matrix under pi; rows sum to 1."""
    validate_policy(pi, mdp)
    return np.einsum("sa,sat->st", pi.probs, mdp.transition)


def sample_trajectory(mdp: TabularMdp, pi: Policy, start: int,
                      horizon: int, seed: int) -> Trajectory:
    """Roll out `horizon` steps from `start`; deterministic given seed."""
    validate_policy(pi, mdp)
    if not 0 <= start < mdp.n_states:
        raise ValueError(f"start state {start} out of range")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    rng = _rng(seed, _TAG_TRAJECTORY)
    cum_pi = np.cumsum(pi.probs, axis=1)
    cum_t = np.cumsum(mdp.transition, axis=2)
    n_a = mdp.n_actions
    n_s = mdp.n_states
    u = rng.random((horizon, 2))
    states = np.empty(horizon + 1, dtype=np.int64)
    actions = np.empty(horizon, dtype=np.int64)
    rewards = np.empty(horizon, dtype=np.float64)
    s = int(start)
    states[0] = s
    for t in range(horizon):
        a = min(int(np.searchsorted(cum_pi[s], u[t, 0], side="right")), n_a - 1)
        s2 = min(int(np.searchsorted(cum_t[s, a], u[t, 1], side="right")), n_s - 1)
        actions[t] = a
        rewards[t] = mdp.reward[s, a]
        states[t + 1] = s2
        s = s2
    return Trajectory(states, actions, rewards)


def sample_chrono_batch(trajectories, batch_size: int,
                        step_range: tuple[int, int], gamma: float,
                        seed: int) -> ChronoBatch:
    """Draw (x_i, x_j) pairs with a uniform step gap from a trajectory pool.

    The start index i is uniform over positions admitting at least k_min
    remaining steps; the gap is uniform over [k_min, min(k_max, remaining)].
    agg_rew sums rewards inclusively over t = 0..gap with discount gamma, so
    the sample never needs a state past the recorded final transition.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("empty trajectory set")
    k_min, k_max = int(step_range[0]), int(step_range[1])
    if not 1 <= k_min <= k_max:
        raise ValueError(f"need 1 <= k_min <= k_max, got {step_range}")
    for idx, tr in enumerate(trajectories):
        if tr.horizon <= k_min:
            raise ValueError(f"trajectory {idx} has {tr.horizon} steps; "
                             f"every trajectory must be longer than k_min={k_min}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = _rng(seed, _TAG_CHRONO)
    cols = {name: np.empty(batch_size, dtype=np.int64)
            for name in ("x_i", "x_i1", "x_j", "x_j1", "a_i", "step_gap",
                         "traj_index", "pos_i")}
    for name in ("r_i", "r_j", "agg_rew"):
        cols[name] = np.empty(batch_size, dtype=np.float64)
    for b in range(batch_size):
        ti = int(rng.integers(len(trajectories)))
        tr = trajectories[ti]
        h = tr.horizon
        i = int(rng.integers(0, h - k_min))
        g_hi = min(k_max, h - 1 - i)
        gap = int(rng.integers(k_min, g_hi + 1))
        j = i + gap
        agg = 0.0
        disc = 1.0
        for t in range(gap + 1):
            agg += disc * tr.rewards[i + t]
            disc *= gamma
        cols["x_i"][b] = tr.states[i]
        cols["x_i1"][b] = tr.states[i + 1]
        cols["x_j"][b] = tr.states[j]
        cols["x_j1"][b] = tr.states[j + 1]
        cols["a_i"][b] = tr.actions[i]
        cols["r_i"][b] = tr.rewards[i]
        cols["r_j"][b] = tr.rewards[j]
        cols["agg_rew"][b] = agg
        cols["step_gap"][b] = gap
        cols["traj_index"][b] = ti
        cols["pos_i"][b] = i
    return ChronoBatch(**cols)


def four_rooms_layout(size: int) -> np.ndarray:
    """Boolean open-cell grid: four rooms separated by walls with one door
    per half-wall."""
    if size < 5:
        raise ValueError(f"size must be >= 5, got {size}")
    w = size // 2
    open_ = np.ones((size, size), dtype=bool)
    open_[w, :] = False
    open_[:, w] = False
    near = w // 2
    far = w + 1 + (size - w - 1) // 2
    open_[near, w] = True
    open_[far, w] = True
    open_[w, near] = True
    open_[w, far] = True
    return open_


def grid_state_index(layout: np.ndarray, cell: tuple[int, int]) -> int:
    """Row-major index of an open cell among the open cells of a layout."""
    r, c = int(cell[0]), int(cell[1])
    size = layout.shape[0]
    if not (0 <= r < size and 0 <= c < size):
        raise ValueError(f"cell {cell} outside the {size}x{size} grid")
    if not layout[r, c]:
        raise ValueError(f"cell {cell} is a wall")
    open_cells = np.argwhere(layout)
    return int(np.flatnonzero((open_cells[:, 0] == r) & (open_cells[:, 1] == c))[0])


_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


def four_rooms(size: int, goal: tuple[int, int], slip: float,
               gamma: float = 0.99) -> TabularMdp:
    """Four-rooms gridworld: 4 move actions, slip probability of a uniformly
    random move, reward 1 at the absorbing goal cell and 0 elsewhere."""
    if not 0.0 <= slip < 1.0:
        raise ValueError(f"slip must lie in [0, 1), got {slip}")
    layout = four_rooms_layout(size)
    open_cells = [tuple(rc) for rc in np.argwhere(layout)]
    index = {cell: i for i, cell in enumerate(open_cells)}
    goal_state = grid_state_index(layout, goal)
    n = len(open_cells)
    n_a = len(_MOVES)

    def move(cell, a):
        r, c = cell[0] + _MOVES[a][0], cell[1] + _MOVES[a][1]
        if 0 <= r < size and 0 <= c < size and layout[r, c]:
            return index[(r, c)]
        return index[cell]

    transition = np.zeros((n, n_a, n))
    reward = np.zeros((n, n_a))
    for s, cell in enumerate(open_cells):
        if s == goal_state:
            transition[s, :, s] = 1.0
            reward[s, :] = 1.0
            continue
        for a in range(n_a):
            transition[s, a, move(cell, a)] += 1.0 - slip
            for b in range(n_a):
                transition[s, a, move(cell, b)] += slip / n_a
    mdp = TabularMdp(transition, reward, gamma)
    validate(mdp)
    return mdp


def random_mdp(n_states: int, n_actions: int, gamma: float, seed: int,
               max_support: int | None = None,
               reward_range: tuple[float, float] = (0.0, 1.0)) -> TabularMdp:
    """Seeded random MDP; each transition row is supported on at most
    max_support states (all states when None)."""
    rng = _rng(seed, _TAG_RANDOM_MDP)
    support = n_states if max_support is None else min(max_support, n_states)
    transition = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            idx = rng.choice(n_states, size=support, replace=False)
            w = rng.random(support) + 1e-3
            transition[s, a, idx] = w / w.sum()
    reward = rng.uniform(reward_range[0], reward_range[1], (n_states, n_actions))
    mdp = TabularMdp(transition, reward, gamma)
    validate(mdp)
    return mdp


def reference_six_state_mdp() -> TabularMdp:
    """The fixed 6-state, 2-action MDP used by the end-to-end recovery checks."""
    return random_mdp(6, 2, gamma=0.9, seed=REFERENCE_MDP_SEED, max_support=3)


def uniform_policy(mdp: TabularMdp) -> Policy:
    return Policy(np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions))


def epsilon_greedy_policy(mdp: TabularMdp, epsilon: float,
                          tol: float = 1e-10) -> Policy:
    """epsilon-greedy smoothing of the value-iteration optimum."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    _, greedy = value_iteration(mdp, tol)
    probs = epsilon / mdp.n_actions + (1.0 - epsilon) * greedy.probs
    return Policy(probs)


def random_policy(mdp: TabularMdp, seed: int) -> Policy:
    """Seeded random stochastic policy."""
    rng = _rng(seed, _TAG_RANDOM_POLICY)
    w = rng.random((mdp.n_states, mdp.n_actions)) + 1e-3
    return Policy(w / w.sum(axis=1, keepdims=True))


def mdp_to_json_dict(mdp: TabularMdp) -> dict:
    return {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
    }


def mdp_from_json_dict(doc: dict) -> TabularMdp:
    mdp = TabularMdp(np.asarray(doc["transition"], dtype=np.float64),
                     np.asarray(doc["reward"], dtype=np.float64),
                     float(doc["gamma"]))
    if mdp.n_states != int(doc["n_states"]) or mdp.n_actions != int(doc["n_actions"]):
        raise ValueError("declared n_states/n_actions do not match the tables")
    validate(mdp)
    return mdp


def save_mdp_json(mdp: TabularMdp, path) -> None:
    with open(path, "w") as fh:
        json.dump(mdp_to_json_dict(mdp), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_mdp_json(path) -> TabularMdp:
    with open(path) as fh:
        return mdp_from_json_dict(json.load(fh))


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Write (step, state, action, reward) rows; the terminal state gets a
    final row with empty action/reward cells."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "state", "action", "reward"])
        for t in range(traj.horizon):
            writer.writerow([t, int(traj.states[t]), int(traj.actions[t]),
                             f"{traj.rewards[t]:.17g}"])
        writer.writerow([traj.horizon, int(traj.states[-1]), "", ""])
