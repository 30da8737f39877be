//! Adapter-switching PPO: rollout collection, advantage estimation and the
//! per-method training loops.

mod bench;
mod config;
mod math;
mod methods;
mod rollout;
mod stack;
mod train;

pub use bench::PpoBench;
pub use config::PpoConfig;
pub use math::{clipped_objective, gae, ppo_clip_loss, shaped_rewards, value_loss, whiten};
pub use methods::{
    method_by_name, method_for_kind, registry, DynamicLoraPpo, FullFtPpo, HydraPpo, InitSource,
    JHydraPpo, LoraPpo, MinibatchStats, PpoInit, PpoMethod,
};
pub use rollout::{collect_rollouts, collect_rollouts_with, Minibatch, RolloutBatch};
pub use stack::{AdapterSnapshot, Phase, PhasePurpose, PhaseTrace, Role, Stack};
pub use train::{
    calibrate_on_policy, prepare_prompts, train_ppo, PpoLogEntry, PpoRun, RunStatus, TrainOptions,
};
