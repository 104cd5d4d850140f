use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("Dirichlet concentration must be strictly positive (got {0})")]
    NonPositiveAlpha(f64),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("at least one non-control arm is required")]
    EmptyArms,
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Sobol dimension {requested} exceeds the shipped table ({max})")]
    DimensionUnsupported { requested: usize, max: usize },
    #[error("draw table is empty")]
    EmptyTable,
    #[error("indicator for arm {0} has zero variance; ICC undefined")]
    DegenerateVariance(usize),
    #[error("every column was dropped from the design")]
    AllColumnsDropped,
    #[error("non-finite value in regression input")]
    NonFiniteInput,
    #[error("Gram matrix of retained columns is singular")]
    SingularGram,
    #[error("coefficient {0} was not retained by the fit")]
    MissingBetaColumn(String),
    #[error("ratio denominator is zero")]
    ZeroDenominator,
    #[error("analytic bias requires equal concentrations across arms")]
    UnbalancedAlphaUnsupported,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            Error::Io(e.to_string())
        } else {
            Error::Parse(e.to_string())
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.to_string())
        } else {
            Error::Parse(e.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
