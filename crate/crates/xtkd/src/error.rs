//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`].  Variants are
//! grouped by failure class rather than by module so that callers can match
//! on *what went wrong* (shape clash, numerical domain, configuration, ...)
//! without caring where it happened.

/// Alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands whose shapes do not compose for the named operation.
    #[error("shape mismatch in {op}: left is {lhs}, right is {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// An index or size parameter outside its legal range.
    #[error("{what} out of range: got {got}, allowed {allowed}")]
    OutOfRange {
        what: &'static str,
        got: String,
        allowed: String,
    },

    /// Input violates a documented precondition (unsorted spectrum, empty
    /// batch, bad label, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value outside the mathematical domain of the operation
    /// (non-positive input to a log-based loss, non-finite entries, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A graph leaf was never bound before `forward`.
    #[error("unbound leaf {name:?} (node {id})")]
    UnboundLeaf { name: String, id: usize },

    /// An update was attempted on a frozen network.
    #[error("frozen network {name:?} cannot be updated")]
    FrozenViolation { name: String },

    /// The singular gap required by the fixed-subspace gradient rule is
    /// numerically degenerate.
    #[error(
        "degenerate singular gap at cut {r}: sigma[{}] - sigma[{r}] = {gap:.3e} <= {threshold:.3e}",
        r - 1
    )]
    DegenerateGap { r: usize, gap: f64, threshold: f64 },

    /// A config file could not be parsed or validated.  `key` is the
    /// section-qualified key path, e.g. `dataset.latent_dim`.
    #[error("config error at {key}: {message}")]
    Config { key: String, message: String },

    /// A serialized artifact (matrix, checkpoint, CSV) failed to parse.
    #[error("parse error in {what}: {message}")]
    Parse { what: &'static str, message: String },

    /// One or more runs of an experiment failed.
    #[error("run failure: {0}")]
    RunFailure(String),

    /// A preset's built-in assertion did not hold.
    #[error("assertion failed: {0}")]
    AssertionFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Helper for shape errors: formats both operand shapes.
    pub fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape {
            op,
            lhs: format!("{}x{}", lhs.0, lhs.1),
            rhs: format!("{}x{}", rhs.0, rhs.1),
        }
    }
}
