use thiserror::Error;

/// Errors raised by the estimation toolkit.
#[derive(Debug, Error)]
pub enum BlpError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("share inversion failed in market {market}: residual {residual:.3e} after {iterations} iterations")]
    Inversion {
        market: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("quadrature rule too large: {nodes} nodes exceeds {limit}; use a monte_carlo rule instead")]
    RuleTooLarge { nodes: u128, limit: usize },

    #[error("linear program too large: {rows}x{cols} exceeds the dense solver guard")]
    LpTooLarge { rows: usize, cols: usize },

    #[error("infeasible linear program: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("all replications failed: {0}")]
    StudyFailed(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BlpError {
    pub(crate) fn dimension(what: &'static str, expected: usize, actual: usize) -> Self {
        Self::Dimension {
            what,
            expected,
            actual,
        }
    }

    /// True for errors caused by malformed inputs rather than numerical trouble.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::Dimension { .. } | Self::Data(_) | Self::Csv(_) | Self::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, BlpError>;
