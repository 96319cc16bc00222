use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Jets of `H` are undefined at the origin.
    #[error("norm is not differentiable at the origin")]
    DegeneratePoint,

    /// The uniform-ellipticity probe found a nonpositive lower constant.
    #[error("norm fails uniform ellipticity (lambda_* = {lambda_star})")]
    NonElliptic { lambda_star: f64 },

    /// An iterative method failed to reach its tolerance.
    #[error("{context}: no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        context: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// A geometric precondition was violated (e.g. shapes not tangent).
    #[error("geometry: {0}")]
    Geometry(String),

    /// An input lies outside the operation's domain.
    #[error("domain: {0}")]
    Domain(String),

    /// Invalid configuration.
    #[error("config: {0}")]
    Config(String),

    /// A mesh or solve exceeded its resource budget.
    #[error("resource: {0}")]
    Resource(String),

    /// Numeric failure inside a solver.
    #[error("numeric: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
