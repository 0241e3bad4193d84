use alloc::string::String;

/// Errors raised by the engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("training diverged in stage {stage} at epoch {epoch} (loss {loss})")]
    Diverged { stage: usize, epoch: usize, loss: f64 },
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("tensor of {0} elements is too large to allocate")]
    TooLarge(usize),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
