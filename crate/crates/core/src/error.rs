use thiserror::Error;

use softmesh_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("face {0} is degenerate (zero area)")]
    DegenerateFace(usize),

    #[error("vertex {0} has no neighbours")]
    IsolatedVertex(usize),

    #[error("point {index} has depth {depth}, not beyond the near plane {near}")]
    BehindNearPlane { index: usize, depth: f64, near: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("non-finite loss at iteration {iteration} (stage {stage}, sigma {sigma}): {detail}")]
    NonFiniteLoss {
        iteration: usize,
        stage: usize,
        sigma: f64,
        detail: String,
    },

    #[error("ICP objective became non-finite at iteration {0}")]
    IcpDiverged(usize),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Failures of the numerics themselves, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. }
                | Error::IcpDiverged(_)
                | Error::Tensor(TensorError::NonFiniteGradient(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
