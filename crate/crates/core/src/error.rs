use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("reduced Laplacian is singular (grid disconnected?)")]
    SingularLaplacian,
    #[error("removing lines {0:?} would disconnect the grid")]
    WouldDisconnect(alloc::vec::Vec<usize>),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("no convergence after {iterations} iterations (worst residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("problem too large for the enumeration oracle: {0}")]
    TooLarge(String),
    #[error("redraw budget exhausted for scenario {index}")]
    TooManyInfeasible { index: usize },
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("layer widths cannot be split into node blocks: {0}")]
    InvalidBlocking(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("no valid topology perturbation: {0}")]
    NoValidPerturbation(String),
    #[error("incompatible topology: {0}")]
    IncompatibleTopology(String),
}
