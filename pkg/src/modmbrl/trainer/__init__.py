"""Model-based training loop across designs and terrains."""

from .collect import collect_onpolicy, imagined_actions
from .config import ConfigError, ExperimentConfig, Hyperparams, load_config, parse_config, with_overrides
from .curriculum import CurriculumState
from .dataset import (Trajectory, TrajectoryDataset, collect_random, rollout_open_loop,
                      split_by_trajectory, spline_actions, stratified_batches)
from .episodes import EpisodeBatch, baseline_episodes, blind_window, policy_episodes, run_episodes
from .model_fit import EmptyDatasetError, FitResult, evaluate_mse, train_model, train_torque_estimator
from .policy_opt import (ImaginationBuffer, LRState, PolicyResult, ValidationSet, adapt_lr, imagine,
                         make_buffer, optimize_policy, sample_entries)
from .run import RunAborted, RunResult, load_networks, run

__all__ = [n for n in dir() if not n.startswith("_")]
