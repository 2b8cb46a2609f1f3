use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate weight: {0}")]
    DegenerateWeight(String),

    #[error("degenerate ternary layer: every entry falls below the threshold")]
    DegenerateTernary,

    #[error("degenerate split: a = {a} is outside (0, 1)")]
    SplitDegenerate { a: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("unsupported operand width {0}")]
    UnsupportedWidth(u32),

    #[error("configuration infeasible: {0}")]
    ConfigInfeasible(String),

    #[error("metric unavailable: {0}")]
    MetricUnavailable(String),

    #[error("no feasible design point: {0}")]
    NoFeasiblePoint(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
