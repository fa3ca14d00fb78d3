//! Crate-wide error type.

use std::fmt;

use thiserror::Error;

/// Identifies one Taylor coefficient of one interaction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CoeffId {
    pub target: Target,
    pub m: u32,
    pub n: u32,
}

/// Which interaction term a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    F,
    G,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::F => write!(f, "F"),
            Target::G => write!(f, "G"),
        }
    }
}

impl fmt::Display for CoeffId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({},{})", self.target, self.m, self.n)
    }
}

fn join_coeffs(ids: &[CoeffId]) -> String {
    ids.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Error)]
pub enum LvError {
    #[error("denominator 1 + u vanishes at u = {u}")]
    DenominatorZero { u: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: String, reason: String },

    #[error("requested {requested} modes but the grid resolves only {max} (need K <= N/2)")]
    TooManyModes { requested: usize, max: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite state at step {step}: {detail}")]
    NonFiniteState { step: usize, detail: String },

    #[error("assembled initial data negative at node {node} (value {value:.6e}); epsilon too large")]
    NegativeData { node: usize, value: f64 },

    #[error("ill-conditioned epsilon stencil (Vandermonde condition {cond:.3e})")]
    IllConditionedStencil { cond: f64 },

    #[error("variation stack is missing order {0}")]
    MissingLowerOrder(usize),

    #[error("projection ratio non-positive on mode {mode}; noise exceeded signal")]
    SignLoss { mode: usize },

    #[error("all data projections vanish; first-order recovery impossible")]
    DegenerateData,

    #[error("design matrix rank deficient; unidentifiable coefficients: {}", join_coeffs(coefficients))]
    RankDeficient { coefficients: Vec<CoeffId> },

    #[error("structural fit residual {residual:.3e} exceeds 10x recovery residual {scale:.3e}")]
    InconsistentTable { residual: f64, scale: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<LvError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LvError {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn at_stage(self, stage: impl Into<String>) -> LvError {
        LvError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Innermost stage annotation, if any.
    pub fn stage(&self) -> Option<&str> {
        match self {
            LvError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, LvError>;
