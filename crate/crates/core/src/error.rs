use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coefficient tensor fails ellipticity: worst form {worst_form:.3e}, bound violation {bound_violation:.3e}")]
    NotElliptic {
        worst_form: f64,
        bound_violation: f64,
    },

    #[error("dyadic filtration construction failed at level {level}: {reason}")]
    Filtration { level: u32, reason: String },

    #[error("solver did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("DOF budget exceeded: {dofs} > {limit}")]
    TooLarge { dofs: usize, limit: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
