use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("spin quantum number {0} is not a non-negative half-integer")]
    InvalidSpin(f64),

    #[error("duplicate site label `{0}`")]
    DuplicateSite(String),

    #[error("site index {site} out of range for layout with {sites} sites")]
    SiteOutOfRange { site: usize, sites: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("missing site `{0}` in layout")]
    MissingSite(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("no matching field in [{lo} mT, {hi} mT]")]
    NoMatchingField { lo: f64, hi: f64 },

    #[error("degenerate denominator in gap estimate ({0} MHz)")]
    DegenerateDenominator(f64),

    #[error("branch tracking ambiguous at B = {field} mT (best overlap {overlap:.3})")]
    OverlapAmbiguity { field: f64, overlap: f64 },

    #[error("step budget exceeded: {needed} steps needed, limit {limit}")]
    StepBudget { needed: usize, limit: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("unknown scenario `{name}`; registered: {known}")]
    UnknownScenario { name: String, known: String },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
