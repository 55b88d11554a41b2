use thiserror::Error;

/// State at the moment a training run produced a non-finite loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Core(#[from] farskip_core::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("metric log error: {0}")]
    Log(String),
    #[error("non-finite loss at step {}: loss {} lr {} grad norm {}", .0.step, .0.loss, .0.lr, .0.grad_norm)]
    Diverged(Divergence),
}

pub type Result<T> = std::result::Result<T, DistillError>;
