"""Behavioral-metric state representations on tabular MDPs.

Library layout:
  mdp            tabular MDPs, policies, rollouts, chrono-pair sampling
  distances      the diffuse distance, angular/cosine/L1 baselines, IQE
  exact_metrics  exact fixed points of the metric operators + optimal transport
  temporal       endpoint-conditioned returns and the two range constraints
  grad           reverse-mode autodiff, Adam, finite-difference harness
  trainer        encoders, losses, EMA target, training loop
  verify         property suites with independent oracles
  cli            exact | train | check | oracle
"""

__version__ = "0.1.0"

from .distances import (IqeShape, cosine_distance, d_hat, d_hat_rows, iqe,
                        iqe_rows, l1_distance, mico_angular)
from .exact_metrics import (ChronoMetricTable, ConvergenceError, MetricTable,
                            bisim_fixed_point, chrono_fixed_point,
                            mico_fixed_point, wasserstein1)
from .grad import ParamStore, adam_step, backward, leaf
from .mdp import (ChronoBatch, Policy, TabularMdp, Trajectory,
                  epsilon_greedy_policy, four_rooms, policy_reward,
                  policy_transition, random_mdp, reference_six_state_mdp,
                  sample_chrono_batch, sample_trajectory, uniform_policy,
                  validate, value_iteration)
from .temporal import (ConditionedReturn, UnreachableEndpointError,
                       check_lower_bound, check_upper_bound,
                       conditioned_return, endpoint_probability, m_star)
from .trainer import (DivergenceError, MHead, PhiEncoder, PsiNetwork,
                      ScrModel, TargetPhi, TrainerConfig, TrainingReport,
                      ema_update, evaluate_metric_recovery, loss_low,
                      loss_phi, loss_psi, loss_up, total_loss, train)

__all__ = [name for name in dir() if not name.startswith("_")]
