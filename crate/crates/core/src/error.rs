use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// `column` is the 1-based byte column at which parsing stopped.
    #[error("syntax error at column {column}: {message}")]
    Syntax { column: usize, message: String },

    #[error("unknown identifier `{name}` at column {column}")]
    UnknownIdentifier { name: String, column: usize },

    #[error("parameter `{0}` is not bound")]
    UnboundParameter(String),

    #[error("map value {value} at x = {x} is outside [0,1] or not finite")]
    Domain { x: f64, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("not implemented: {0}")]
    NotImplemented(String),

    #[error("did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("chain does not mix: {0}")]
    NotMixing(String),

    #[error("integrand ln|T'| is singular on a set of positive mass near x = {x}")]
    SingularIntegrand { x: f64 },

    #[error("stored discretization error {bound:e} exceeds half the requested accuracy {delta:e}")]
    ResolutionTooCoarse { bound: f64, delta: f64 },

    #[error("PowerTooSmall: T = {t} is below T_min = {t_min}; use repeated squaring instead")]
    PowerTooSmall { t: String, t_min: String },

    #[error("polynomial certificate failed: {0}")]
    CertificateFailed(String),
}
