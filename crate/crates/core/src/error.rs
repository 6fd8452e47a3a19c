use std::fmt;

use thiserror::Error;

use crate::model::EffectiveAssignment;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid group size: need at least one neighbor, got n = {0}")]
    InvalidGroupSize(usize),

    #[error("saturated mode requires a neighbor ordering (group {group})")]
    MissingOrdering { group: String },

    #[error("reference mode requires a reference set for unit {unit} in group {group}")]
    MissingReferenceSet { group: String, unit: String },

    #[error("cell means missing for {} assignment(s): {}", missing.len(), join(missing))]
    IncompleteCells { missing: Vec<EffectiveAssignment> },

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("groups of different sizes {sizes:?}; stratify by group size first")]
    StratificationRequired { sizes: Vec<usize> },

    #[error("singular design matrix (rank {rank} < {columns} columns)")]
    SingularDesign { rank: usize, columns: usize },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("saturation column required for partial-population contrasts")]
    MissingSaturation,

    #[error("enumeration over 2^{} assignment vectors exceeds the cap n <= {cap}", n + 1)]
    EnumerationTooLarge { n: usize, cap: usize },

    #[error(transparent)]
    Undefined(#[from] Undefined),
}

/// Marker for a contrast or mean that cannot be computed from the sample.
///
/// Carries the offending assignments so callers can report which cells were
/// too thin. Undefined results are never replaced by zero.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct Undefined {
    pub cells: Vec<EffectiveAssignment>,
    pub reason: String,
}

impl Undefined {
    pub fn new(cells: Vec<EffectiveAssignment>, reason: impl Into<String>) -> Self {
        Self {
            cells,
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Undefined {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.cells.is_empty() {
            write!(f, "undefined: {}", self.reason)
        } else {
            write!(f, "undefined: {} [{}]", self.reason, join(&self.cells))
        }
    }
}

fn join(cells: &[EffectiveAssignment]) -> String {
    cells
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}
