use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty token sequence")]
    EmptySequence,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("coherence undefined (zero weight mass or zero vector)")]
    UndefinedCoherence,
    #[error("distribution is not normalized: sums to {0}")]
    InvalidDistribution(f64),
    #[error("pair has no coherence score")]
    MissingScore,
    #[error("insufficient pairs: need {need}, have {have}")]
    InsufficientData { need: usize, have: usize },
    #[error("degenerate coherence distribution (sigma = 0)")]
    DegenerateDistribution,
    #[error("training diverged: {0}")]
    DivergedTraining(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] numcore::NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-parsable class name used in CLI error lines.
    pub fn class(&self) -> &'static str {
        match self {
            Error::EmptyCorpus => "EmptyCorpus",
            Error::EmptySequence => "EmptySequence",
            Error::Parse { .. } => "ParseError",
            Error::UndefinedCoherence => "UndefinedCoherence",
            Error::InvalidDistribution(_) => "InvalidDistribution",
            Error::MissingScore => "MissingScore",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::DegenerateDistribution => "DegenerateDistribution",
            Error::DivergedTraining(_) => "DivergedTraining",
            Error::Input(_) => "InputError",
            Error::Config(_) => "ConfigError",
            Error::Num(_) => "NumericalError",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
