use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("global-logit thresholds must be strictly decreasing (index {index})")]
    NonDecreasingThresholds { index: usize },

    #[error("numerical underflow in {pass} pass for subject {subject} at wave {wave}")]
    Underflow {
        pass: &'static str,
        subject: String,
        wave: usize,
    },

    #[error("non-finite log-likelihood for subject {subject}")]
    NonFinite { subject: String },

    #[error("degenerate posterior for subject {subject}")]
    DegeneratePosterior { subject: String },

    #[error("singular weighted design; collinear columns: {}", columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("instance too large for brute-force enumeration ({paths} terms for subject {subject})")]
    TooLarge { subject: String, paths: f64 },

    #[error("all {starts} starts degenerate; try smaller (G, K, H)")]
    AllStartsDegenerate { starts: usize },

    #[error("sandwich undefined at boundary: {0}")]
    Boundary(String),

    #[error("non-finite likelihood while differentiating coordinate {coordinate}")]
    NonFiniteDerivative { coordinate: usize },

    #[error("no converged cell in grid")]
    NoConvergedCell,

    #[error("mismatched fits: {0}")]
    Mismatch(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
