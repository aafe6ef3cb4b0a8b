//! Graph Decision Transformer engine.
//!
//! Trajectories are serialized into causal token graphs over return-to-go,
//! state and action tokens, processed by a relation-enhanced graph-attention
//! stack (optionally refined by a patch-level sequence transformer), trained by
//! supervised action prediction and evaluated by return-conditioned rollout.

pub mod error;
pub mod evalrollout;
pub mod gradsuite;
pub mod graphformer;
pub mod graphrep;
pub mod model;
pub mod ndcore;
pub mod seed;
pub mod seqformer;
pub mod trainer;
pub mod trajstore;

pub use error::{GdtError, Result};
