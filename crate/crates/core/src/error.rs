use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("block {block} has a zero entry at position {index}")]
    ZeroEntry { block: usize, index: usize },
    #[error("block {block} has a zero label")]
    ZeroLabel { block: usize },
    #[error("block {block} has no entries")]
    EmptyBlock { block: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(&'static str),
    #[error("invalid integrator options: {0}")]
    InvalidOptions(&'static str),
    #[error("step size underflow at t = {t} (h = {h})")]
    StepSizeUnderflow { t: f64, h: f64, state: Vec<f64> },
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("operation requires a strictly positive stability constant")]
    EpsilonZero,
    #[error("potential is not differentiable at coordinate {index}")]
    NonDifferentiablePoint { index: usize },
    #[error("block {block} has size {size}, expected 2")]
    BlockSizeNot2 { block: usize, size: usize },
    #[error("invalid range: {0}")]
    InvalidRange(&'static str),
    #[error("trajectory did not reach the residual tolerance")]
    NotConverged,
    #[error("epsilon grid must be non-empty and strictly increasing")]
    InvalidGrid,
}

pub type Result<T> = core::result::Result<T, Error>;
