//! Supervised training: config presets, the step loop with checkpoints and
//! logs, and ablation sweeps.

mod ablate;
mod config;
mod run;

pub use ablate::{ablate, variants, AblationAxis, AblationReport, AblationRow};
pub use config::{AblateConfig, TrainConfig};
pub use run::{
    eval_env, read_losses, resume, train, StepRecord, TrainSummary, Trainer, BEST_CHECKPOINT,
    CONFIG_SNAPSHOT, EVAL_LOG, LAST_CHECKPOINT, TRAIN_LOG,
};
