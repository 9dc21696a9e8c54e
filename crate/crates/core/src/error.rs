use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field violates its invariant.
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A split without LBT or without SBT RBs was passed to a two-level routine.
    #[error("degenerate split: NS = {ns}, NL = {nl}")]
    DegenerateSplit { ns: usize, nl: usize },

    /// The water levels do not keep every power strictly positive.
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("enumeration budget exceeded: {states} states > {budget}")]
    BudgetExceeded { states: u128, budget: u128 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
