//! Embedding-reward reinforcement learning on the pick-and-place task.

pub mod buffer;
pub mod ddpg;
pub mod env;

pub use buffer::{her_final, ReplayBuffer, Transition};
pub use ddpg::{evaluate_policy, load_policy, save_policy, train_ddpg, write_episode_log, PolicyMetadata, RlOutcome, Agent, DdpgConfig, EpisodeRow, EvalReport, Policy};
pub use env::{calibrate_threshold, compute_reward, oracle_action, select_goal, Env, EnvConfig, MdpState, RewardNorm, Task};
