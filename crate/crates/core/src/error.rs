use thiserror::Error;

/// Errors raised across the estimation toolkit.
#[derive(Debug, Error)]
pub enum RlqeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("corruption fraction {0} is at or above the breakdown point 1/2")]
    BreakdownPoint(f64),

    #[error("unobservable system: no s <= {s_max} makes the observability Gram matrix nonsingular")]
    Unobservable { s_max: usize },

    #[error("horizon too short: window needs t = {window} but T = {horizon}; minimum viable T is {min_horizon}")]
    HorizonTooShort {
        window: usize,
        horizon: usize,
        min_horizon: usize,
    },

    #[error("filter not exponentially stable: closed-loop spectral radius {0}")]
    FilterUnstable(f64),

    #[error("dynamics not strictly stable: spectral radius {0}")]
    NotStrictlyStable(f64),

    #[error("problem too large for this backend: {0}")]
    TooLarge(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<RlqeError>,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl RlqeError {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        RlqeError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, RlqeError>;
