//! Training loops for the toy FarSkip MoE: from-scratch pretraining and
//! self-distillation of a rewired student against its regular teacher.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod log;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod sweep;
pub mod train;

pub use error::{DistillError, Divergence, Result};
pub use train::{fcsd_train, pretrain, train, TrainConfig, TrainOutcome};
