use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite after {tries} jitter attempts")]
    NotPositiveDefinite { tries: usize },

    #[error("matrix is not symmetric (max relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("triangular factor has a singular diagonal at index {0}")]
    SingularDiagonal(usize),

    #[error("unsupported derivative order: {0}")]
    UnsupportedOrder(String),

    #[error("missing coefficient `{0}`")]
    MissingCoefficient(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("unknown function `{0}`")]
    UnknownFunction(String),

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("range out of domain at `{path}`: {message}")]
    RangeOutOfDomain { path: String, message: String },

    #[error("solver instability: {0}")]
    Instability(String),

    #[error("training failed at epoch {epoch}: {source}")]
    Training {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at_epoch(self, epoch: usize) -> Self {
        match self {
            e @ Error::Training { .. } => e,
            e => Error::Training {
                epoch,
                source: Box::new(e),
            },
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
