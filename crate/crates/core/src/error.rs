//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates an invariant, or an index is out of
    /// range for the configured array.
    #[error("configuration error: {0}")]
    Config(String),

    /// A least-squares fit failed to converge or produced an invalid
    /// parameter (e.g. a non-positive decay time).
    #[error("fit error: {0}")]
    Fit(String),

    /// Two fitted mixture components are closer than their pooled width.
    #[error("degenerate level model: {0}")]
    Degenerate(String),

    /// More than one firing subset is compatible with a fitted level.
    #[error("ambiguous level assignment: {0}")]
    Ambiguous(String),

    /// The trigger scan does not exhibit the requested plateau structure.
    #[error("plateau structure error: {0}")]
    Structure(String),

    /// Subset enumeration would exceed the hard size cap.
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// An integer quantity does not fit in the representable range.
    #[error("overflow: {0}")]
    Overflow(String),

    /// Two trigger scans use different level grids.
    #[error("trigger level grids differ: {0}")]
    GridMismatch(String),

    /// An operation that needs data received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A statistical estimate has a zero denominator.
    #[error("undefined estimate: {0}")]
    UndefinedEstimate(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
