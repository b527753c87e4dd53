use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spin projection {0}")]
    InvalidProjection(f64),
    #[error("invalid pair ({0}, {1})")]
    InvalidPair(f64, f64),
    #[error("invalid spin quantum number {0}")]
    InvalidSpin(f64),
    #[error("zero state")]
    ZeroState,
    #[error("not normalized: norm {0}")]
    NotNormalized(f64),
    #[error("matrix is not hermitian (deviation {0:e})")]
    NotHermitian(f64),
    #[error("matrix is not unitary (deviation {0:e})")]
    NotUnitary(f64),
    #[error("negative rate {0}")]
    NegativeRate(f64),
    #[error("step size underflow at t = {0}")]
    StepUnderflow(f64),
    #[error("positivity violated: minimum eigenvalue {0:e}")]
    Positivity(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("division by zero: {0}")]
    Degenerate(String),
    #[error("tolerance not met: {0}")]
    Tolerance(String),
}

pub type Result<T> = std::result::Result<T, Error>;
