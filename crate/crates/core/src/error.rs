use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("root finder did not converge after {iterations} iterations (residual {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },

    #[error("law `{0}` has neither a density nor a quadrature rule; use Monte Carlo expectation")]
    QuadratureUnavailable(String),

    #[error("no sign change of delta on [{lo}, {hi}] (delta(lo) = {f_lo:e}, delta(hi) = {f_hi:e})")]
    BracketFailure { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },

    #[error("fixed-point iteration did not converge after {} iterations", .trace.len())]
    NoConvergence {
        /// (r, c) iterates in order.
        trace: Vec<(f64, f64)>,
    },

    #[error("non-finite iterate at outer iteration {0}")]
    NonFiniteIterate(usize),

    #[error("unknown entry law `{0}` (expected gaussian, rademacher or uniform_scaled)")]
    UnknownEntryLaw(String),

    #[error("unknown {kind} `{name}`")]
    UnknownModel { kind: &'static str, name: String },

    #[error("Hessian is not positive definite")]
    SingularHessian,

    #[error("line search failed at iteration {iteration} (gradient norm {grad_norm:e})")]
    LineSearchFailure { iteration: usize, grad_norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("no records match the requested selection `{0}`")]
    EmptySelection(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub(crate) fn ensure_finite(what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteInput(format!("{what} = {value}")))
    }
}
