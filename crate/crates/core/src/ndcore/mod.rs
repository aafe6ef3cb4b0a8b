//! Reverse-mode autodiff substrate: tensors, the operation tape, parameters,
//! AdamW, checkpoints and the finite-difference gradient checker.

mod checkpoint;
mod gradcheck;
pub mod layers;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, restore_optimizer, restore_params,
    save_checkpoint, Checkpoint, NamedTensors, CHECKPOINT_MAGIC,
};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, ParamCheck};
pub use optim::{AdamConfig, AdamState, LrSchedule, StepStats};
pub use params::{Init, ParamEntry, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{AttnLayout, ConvGeom, Gradients, Tape, Var};
pub use tensor::Tensor;
