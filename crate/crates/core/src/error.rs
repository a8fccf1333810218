use thiserror::Error;

/// Failures while parsing a coefficient expression.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at position {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("undefined variable '{name}' at position {pos}")]
    UndefinedVariable { name: String, pos: usize },
    #[error("variable {variable} exceeds declared dimension {declared}")]
    DimensionMismatch { variable: String, declared: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("in {field}: {source}")]
    Expr {
        field: String,
        #[source]
        source: ExprError,
    },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("unknown builtin problem '{0}'")]
    UnknownProblem(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("stencil is not monotone on axis {axis}: cross-diffusion dominates, need spacing ratio <= {required:.6}")]
    StencilNotMonotone { axis: usize, required: f64 },
    #[error("tolerance {tol:e} too small: truncation horizon {horizon:.3e} exceeds the floating-point range")]
    ToleranceTooSmall { tol: f64, horizon: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("no admissible control at x={x:?}, x'={x_prime:?}, u={control}")]
    EmptySelection { x: Vec<f64>, x_prime: Vec<f64>, control: usize },
    #[error("problem '{0}' has no split form psi1(x,u) + g(z)")]
    MissingSplitForm(String),
    #[error("solve failed at lambda = {lambda}: {source}")]
    SweepFailed {
        lambda: f64,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
