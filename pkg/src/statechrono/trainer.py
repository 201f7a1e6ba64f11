"""Representation learner: encoders, measurement head, the four losses, EMA
target, and the training loop.

Pairing follows the batched pseudocode pattern: one random permutation over
the pooled (i, j) transitions drives the state-encoder loss, and a second
permutation over the batch drives both the pair-embedding loss and the
upper-bound loss. Bootstrap targets go through the EMA copy of the state
encoder and are gradient-blocked.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import grad
from .distances import IqeShape, d_hat_rows, iqe_rows
from .exact_metrics import MetricTable, mico_fixed_point
from .grad import (ParamStore, adam_step, backward, constant, gather_rows,
                   sgd_step, stop_gradient)
from .mdp import (ChronoBatch, Policy, TabularMdp, sample_chrono_batch,
                  sample_trajectory, validate, validate_policy)

_TAG_INIT = 21
_TAG_REPLAY = 22
_TAG_BATCH = 23
_TAG_PERM = 24

PARAM_NAMES = ("phi", "psi_w1", "psi_b1", "psi_w2", "psi_b2", "m_raw_alpha")


class DivergenceError(RuntimeError):
    """Total loss became non-finite or exceeded the divergence limit."""


@dataclass
class TrainerConfig:
    """Desk-scale defaults; step_range defaults to [1, min(10, horizon // 2)]."""

    n_dim: int = 16
    hidden: int = 64
    batch: int = 128
    lr: float = 1e-4
    steps: int = 20000
    step_range: tuple | None = None
    alpha_phi: float = 0.05
    eps_greedy: float = 0.3
    l_up_form: str = "sampled_return"   # or "m_head" for the displayed bound
    iqe_k: int = 4
    horizon: int = 200
    n_trajectories: int = 32
    refresh_every: int = 500
    eval_every: int = 2000
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_scale: float = 0.5
    divergence_limit: float = 1e8
    oracle_tol: float = 1e-10

    @property
    def iqe_l(self) -> int:
        return self.n_dim // self.iqe_k

    def resolved_step_range(self) -> tuple[int, int]:
        if self.step_range is not None:
            return (int(self.step_range[0]), int(self.step_range[1]))
        return (1, max(1, min(10, self.horizon // 2)))

    def check(self) -> None:
        if self.n_dim < 1 or self.n_dim % self.iqe_k != 0:
            raise ValueError(f"n_dim={self.n_dim} must be a positive multiple "
                             f"of iqe_k={self.iqe_k}")
        if self.hidden < 1 or self.batch < 1 or self.steps < 0:
            raise ValueError("hidden and batch must be >= 1, steps >= 0")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.alpha_phi <= 1.0:
            raise ValueError(f"alpha_phi must lie in (0, 1], got {self.alpha_phi}")
        if not 0.0 <= self.eps_greedy <= 1.0:
            raise ValueError(f"eps_greedy must lie in [0, 1], got {self.eps_greedy}")
        if self.l_up_form not in ("sampled_return", "m_head"):
            raise ValueError(f"l_up_form must be 'sampled_return' or 'm_head', "
                             f"got {self.l_up_form!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.horizon < 2 or self.n_trajectories < 1 or self.refresh_every < 1:
            raise ValueError("horizon >= 2, n_trajectories >= 1, refresh_every >= 1")
        k_min, k_max = self.resolved_step_range()
        if not 1 <= k_min <= k_max or k_max >= self.horizon:
            raise ValueError(f"step_range {k_min, k_max} incompatible with "
                             f"horizon {self.horizon}")


@dataclass
class PhiEncoder:
    """State embedding table: a linear map applied to one-hot states."""

    table: np.ndarray


@dataclass
class PsiNetwork:
    """Two affine layers with a rectified-linear hidden activation, mapping a
    concatenated embedding pair (2 n_dim) to one n_dim embedding."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class MHead:
    """Interval-quasimetric head over embedding pairs; the max/mean mixing
    weight is sigmoid(raw_alpha), raw_alpha trainable from 0."""

    raw_alpha: np.ndarray
    k: int
    l: int

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.raw_alpha)))

    @property
    def shape(self) -> IqeShape:
        return IqeShape(self.k, self.l, self.alpha)


@dataclass
class TargetPhi:
    """EMA copy of the state encoder; updated only via ema_update."""

    table: np.ndarray
    alpha: float


class ScrModel:
    """Encoders plus measurement head; parameters live in shared arrays that
    a ParamStore view updates in place."""

    def __init__(self, n_states: int, config: TrainerConfig, seed: int):
        config.check()
        rng = np.random.default_rng([seed, _TAG_INIT])
        n = config.n_dim
        h = config.hidden
        self.phi = PhiEncoder(rng.normal(0.0, config.init_scale, (n_states, n)))
        self.psi = PsiNetwork(
            rng.normal(0.0, np.sqrt(2.0 / (2 * n)), (2 * n, h)),
            np.zeros(h),
            rng.normal(0.0, np.sqrt(2.0 / h), (h, n)),
            np.zeros(n),
        )
        self.m_head = MHead(np.zeros(()), config.iqe_k, config.iqe_l)

    def param_store(self) -> ParamStore:
        store = ParamStore({
            "phi": self.phi.table,
            "psi_w1": self.psi.w1,
            "psi_b1": self.psi.b1,
            "psi_w2": self.psi.w2,
            "psi_b2": self.psi.b2,
            "m_raw_alpha": self.m_head.raw_alpha,
        })
        # keep the model views aliased to the optimizer state
        self.phi.table = store.values["phi"]
        self.psi.w1 = store.values["psi_w1"]
        self.psi.b1 = store.values["psi_b1"]
        self.psi.w2 = store.values["psi_w2"]
        self.psi.b2 = store.values["psi_b2"]
        self.m_head.raw_alpha = store.values["m_raw_alpha"]
        return store


def d_hat_node(u: grad.Node, v: grad.Node) -> grad.Node:
    """Graph version of the diffuse distance, row-wise over the last axis."""
    rad = grad.subtract(grad.add(grad.squared_norm(u), grad.squared_norm(v)),
                        grad.dot(u, v))
    return grad.sqrt(grad.clamp_min(rad, 0.0))


def psi_node(leaves: dict, u: grad.Node, v: grad.Node) -> grad.Node:
    hidden = grad.rectified_linear(
        grad.affine(leaves["psi_w1"], leaves["psi_b1"], grad.concatenate(u, v)))
    return grad.affine(leaves["psi_w2"], leaves["psi_b2"], hidden)


def iqe_node(a: grad.Node, b: grad.Node, k: int, l: int,
             alpha: grad.Node) -> grad.Node:
    """Graph version of the interval quasimetric.

    The first sorted interval always contributes end - start (non-negative by
    construction), so only later intervals go through the rectifier.
    """
    batch = a.value.shape[0]
    s = grad.reshape(a, (batch, k, l))
    e = grad.maximum(s, grad.reshape(b, (batch, k, l)))
    order = np.argsort(s.value, axis=-1, kind="stable")
    s_sorted = grad.take_along_last(s, order)
    e_sorted = grad.take_along_last(e, order)
    first = grad.subtract(grad.slice_last(e_sorted, 0, 1),
                          grad.slice_last(s_sorted, 0, 1))
    if l > 1:
        running = grad.cummax_last(e_sorted)
        prev = grad.slice_last(running, 0, l - 1)
        rest = grad.rectified_linear(
            grad.subtract(grad.slice_last(e_sorted, 1, l),
                          grad.maximum(grad.slice_last(s_sorted, 1, l), prev)))
        comp = grad.sum_over_axis(grad.concatenate(first, rest))
    else:
        comp = grad.sum_over_axis(first)
    mixed = grad.add(
        grad.multiply(alpha, grad.max_over_axis(comp)),
        grad.multiply(grad.subtract(constant(1.0), alpha),
                      grad.mean_over_axis(comp)))
    return mixed


def m_hat_node(leaves: dict, ui: grad.Node, uj: grad.Node,
               k: int, l: int) -> grad.Node:
    alpha = grad.sigmoid(leaves["m_raw_alpha"])
    return iqe_node(ui, uj, k, l, alpha)


def m_hat_values(phi_table: np.ndarray, m_head: MHead,
                 x_i, x_j) -> np.ndarray:
    """Plain-array measurement values for evaluation and constraint checks."""
    return iqe_rows(phi_table[np.asarray(x_i)], phi_table[np.asarray(x_j)],
                    m_head.shape)


def loss_phi(batch: ChronoBatch, leaves: dict, target_phi: np.ndarray,
             gamma: float, perm: np.ndarray) -> grad.Node:
    """State-encoder loss: pooled (i, j) transitions paired by one random
    permutation; targets bootstrap through the EMA table and carry no
    gradient."""
    pool_idx = np.concatenate([batch.x_i, batch.x_j])
    pool_next = np.concatenate([batch.x_i1, batch.x_j1])
    pool_r = np.concatenate([batch.r_i, batch.r_j])
    phi = leaves["phi"]
    u = gather_rows(phi, pool_idx)
    v = gather_rows(phi, pool_idx[perm])
    d_online = d_hat_node(u, v)
    reward_gap = np.abs(pool_r - pool_r[perm])
    boot = d_hat_rows(target_phi[pool_next], target_phi[pool_next[perm]])
    resid = grad.subtract(d_online, constant(reward_gap + gamma * boot))
    return grad.mean(grad.multiply(resid, resid))


def loss_psi(batch: ChronoBatch, leaves: dict, target_phi: np.ndarray,
             gamma: float, perm: np.ndarray) -> grad.Node:
    """Pair-embedding loss. The bootstrap advances only the first state of
    each pair, feeds EMA-table embeddings through the online pair encoder,
    and is gradient-blocked as a whole."""
    phi = leaves["phi"]
    ui = gather_rows(phi, batch.x_i)
    uj = gather_rows(phi, batch.x_j)
    pair = psi_node(leaves, ui, uj)
    d_online = d_hat_node(pair, gather_rows(pair, perm))
    reward_gap = np.abs(batch.r_i - batch.r_i[perm])
    pair_next = psi_node(leaves, constant(target_phi[batch.x_i1]),
                         constant(target_phi[batch.x_j]))
    boot = stop_gradient(d_hat_node(pair_next, gather_rows(pair_next, perm)))
    target = grad.add(constant(reward_gap), grad.scalar_multiply(boot, gamma))
    resid = grad.subtract(d_online, target)
    return grad.mean(grad.multiply(resid, resid))


def loss_low(batch: ChronoBatch, leaves: dict, k: int, l: int) -> grad.Node:
    """Squared error pushing the measurement above the sampled reward sum,
    masked to samples where it still falls short."""
    phi = leaves["phi"]
    m = m_hat_node(leaves, gather_rows(phi, batch.x_i),
                   gather_rows(phi, batch.x_j), k, l)
    diff = grad.subtract(m, constant(batch.agg_rew))
    mask = grad.indicator_positive(batch.agg_rew - m.value)
    return grad.mean(grad.multiply(grad.multiply(diff, diff), mask))


def loss_up(batch: ChronoBatch, leaves: dict, k: int, l: int,
            perm: np.ndarray, l_up_form: str = "sampled_return") -> grad.Node:
    """Squared error pulling |measurement| under the detour bound through the
    permuted partner; the bound is gradient-blocked.

    l_up_form selects the partner term: the partner's sampled reward sum
    ("sampled_return", the operational form) or the partner's own
    measurement ("m_head", the displayed form).
    """
    phi = leaves["phi"]
    ui = gather_rows(phi, batch.x_i)
    uj = gather_rows(phi, batch.x_j)
    m = m_hat_node(leaves, ui, uj, k, l)
    d_i = d_hat_node(ui, gather_rows(ui, perm))
    d_j = d_hat_node(uj, gather_rows(uj, perm))
    if l_up_form == "sampled_return":
        partner = constant(batch.agg_rew[perm])
    elif l_up_form == "m_head":
        partner = grad.absolute(gather_rows(m, perm))
    else:
        raise ValueError(f"unknown l_up_form {l_up_form!r}")
    rhs = stop_gradient(grad.add(grad.add(d_i, d_j), partner))
    lhs = grad.absolute(m)
    diff = grad.subtract(lhs, rhs)
    mask = grad.indicator_positive(lhs.value - rhs.value)
    return grad.mean(grad.multiply(grad.multiply(diff, diff), mask))


def loss_components(batch: ChronoBatch, leaves: dict, target_phi: np.ndarray,
                    gamma: float, perm_pool: np.ndarray, perm_pair: np.ndarray,
                    k: int, l: int,
                    l_up_form: str = "sampled_return") -> dict:
    parts = {
        "loss_phi": loss_phi(batch, leaves, target_phi, gamma, perm_pool),
        "loss_psi": loss_psi(batch, leaves, target_phi, gamma, perm_pair),
        "loss_low": loss_low(batch, leaves, k, l),
        "loss_up": loss_up(batch, leaves, k, l, perm_pair, l_up_form),
    }
    parts["total"] = grad.add(grad.add(parts["loss_phi"], parts["loss_psi"]),
                              grad.add(parts["loss_low"], parts["loss_up"]))
    return parts


def total_loss(batch: ChronoBatch, leaves: dict, target_phi: np.ndarray,
               gamma: float, perm_pool: np.ndarray, perm_pair: np.ndarray,
               k: int, l: int, l_up_form: str = "sampled_return") -> grad.Node:
    """Unweighted sum of the four losses."""
    return loss_components(batch, leaves, target_phi, gamma, perm_pool,
                           perm_pair, k, l, l_up_form)["total"]


def ema_update(target: TargetPhi, source) -> None:
    """target <- alpha * source + (1 - alpha) * target, exactly."""
    src = source.table if isinstance(source, PhiEncoder) else np.asarray(source)
    if src.shape != target.table.shape:
        raise ValueError(f"shape mismatch: target {target.table.shape}, "
                         f"source {src.shape}")
    target.table *= (1.0 - target.alpha)
    target.table += target.alpha * src


@dataclass(frozen=True)
class MetricRecovery:
    mae: float
    rank_corr: float


def evaluate_metric_recovery(phi, mdp: TabularMdp, pi: Policy,
                             exact) -> MetricRecovery:
    """Mean absolute error over all ordered state pairs and Spearman rank
    correlation over pairs with x != y, learned distances vs the exact table."""
    table = phi.table if isinstance(phi, PhiEncoder) else np.asarray(phi)
    exact_values = exact.values if isinstance(exact, MetricTable) else np.asarray(exact)
    gram = table @ table.T
    sq = np.diag(gram)
    learned = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - gram, 0.0))
    mae = float(np.mean(np.abs(learned - exact_values)))
    n = table.shape[0]
    off = ~np.eye(n, dtype=bool)
    from scipy.stats import spearmanr
    rho = spearmanr(learned[off], exact_values[off]).statistic
    return MetricRecovery(mae, float(rho))


@dataclass
class TrainingReport:
    """Per-step losses, periodic recovery snapshots, and the final state."""

    steps: np.ndarray
    loss_phi: np.ndarray
    loss_psi: np.ndarray
    loss_low: np.ndarray
    loss_up: np.ndarray
    loss_total: np.ndarray
    snapshot_steps: np.ndarray
    snapshot_mae: np.ndarray
    snapshot_rank_corr: np.ndarray
    final_mae: float
    final_rank_corr: float
    max_exact_distance: float
    exact: MetricTable
    params: ParamStore
    m_head: MHead
    target_phi: TargetPhi
    seed: int
    config: TrainerConfig


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _sample_replay(mdp, pi, config, seed, round_index):
    trajs = []
    for i in range(config.n_trajectories):
        start = (round_index * config.n_trajectories + i) % mdp.n_states
        traj_seed = _derived_seed(seed, _TAG_REPLAY, round_index, i)
        trajs.append(sample_trajectory(mdp, pi, start, config.horizon, traj_seed))
    return trajs


def train(mdp: TabularMdp, behavior_policy: Policy, config: TrainerConfig,
          seed: int) -> TrainingReport:
    """Run the representation-learning loop; deterministic given seed.

    Each step: sample a chrono batch from the replay trajectories, take one
    optimizer step on the total loss, then EMA-update the target encoder.
    The replay pool is refreshed every refresh_every steps. Aborts with
    DivergenceError when the total loss explodes.
    """
    config.check()
    validate(mdp)
    validate_policy(behavior_policy, mdp)
    model = ScrModel(mdp.n_states, config, seed)
    store = model.param_store()
    target = TargetPhi(model.phi.table.copy(), config.alpha_phi)
    exact = mico_fixed_point(mdp, behavior_policy, config.oracle_tol)
    max_exact = float(exact.values.max())
    step_range = config.resolved_step_range()
    k, l = config.iqe_k, config.iqe_l

    losses = {name: np.empty(config.steps)
              for name in ("loss_phi", "loss_psi", "loss_low", "loss_up", "total")}
    snap_steps, snap_mae, snap_rho = [], [], []

    def snapshot(step):
        rec = evaluate_metric_recovery(model.phi.table, mdp, behavior_policy, exact)
        snap_steps.append(step)
        snap_mae.append(rec.mae)
        snap_rho.append(rec.rank_corr)
        return rec

    snapshot(0)
    trajs = []
    round_index = -1
    for t in range(config.steps):
        if t % config.refresh_every == 0:
            round_index += 1
            trajs = _sample_replay(mdp, behavior_policy, config, seed, round_index)
        batch = sample_chrono_batch(trajs, config.batch, step_range, mdp.gamma,
                                    seed=_derived_seed(seed, _TAG_BATCH, t))
        rng = np.random.default_rng([seed, _TAG_PERM, t])
        perm_pool = rng.permutation(2 * len(batch))
        perm_pair = rng.permutation(len(batch))
        leaves = store.leaves()
        parts = loss_components(batch, leaves, target.table, mdp.gamma,
                                perm_pool, perm_pair, k, l, config.l_up_form)
        total_value = float(parts["total"].value)
        if not np.isfinite(total_value) or total_value > config.divergence_limit:
            raise DivergenceError(f"total loss {total_value!r} at step {t}")
        for name in ("loss_phi", "loss_psi", "loss_low", "loss_up"):
            losses[name][t] = float(parts[name].value)
        losses["total"][t] = total_value
        backward(parts["total"])
        grads = {name: leaves[name].grad for name in PARAM_NAMES}
        if config.optimizer == "adam":
            adam_step(store, grads, lr=config.lr, beta1=config.adam_beta1,
                      beta2=config.adam_beta2, eps=config.adam_eps)
        else:
            sgd_step(store, grads, lr=config.lr)
        ema_update(target, model.phi.table)
        if config.eval_every and (t + 1) % config.eval_every == 0:
            snapshot(t + 1)

    if config.steps and (snap_steps[-1] != config.steps):
        snapshot(config.steps)
    return TrainingReport(
        steps=np.arange(1, config.steps + 1),
        loss_phi=losses["loss_phi"],
        loss_psi=losses["loss_psi"],
        loss_low=losses["loss_low"],
        loss_up=losses["loss_up"],
        loss_total=losses["total"],
        snapshot_steps=np.asarray(snap_steps),
        snapshot_mae=np.asarray(snap_mae),
        snapshot_rank_corr=np.asarray(snap_rho),
        final_mae=float(snap_mae[-1]),
        final_rank_corr=float(snap_rho[-1]),
        max_exact_distance=max_exact,
        exact=exact,
        params=store,
        m_head=model.m_head,
        target_phi=target,
        seed=seed,
        config=config,
    )
