//! Toy environments, return-conditioned rollout and score reporting.

mod env;
mod report;
mod rollout;

pub use env::{Cell, EnvSpec, Observation, Plan, Step, ToyEnv, CELL_PIXELS};
pub use report::{
    compare_reward_settings, eval_report, EnvSummary, EvalReport, EvalRow, RewardComparison,
    SuiteEntry,
};
pub use rollout::{
    env_table, mean_std, rollout, EpisodeTrace, RolloutConfig, RolloutContext, RolloutReport,
};
