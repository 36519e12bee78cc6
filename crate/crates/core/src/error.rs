//! Error type shared by every module of the crate.

use thiserror::Error;

use crate::panel::CohortLabel;
use crate::stacks::Role;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("duplicate observation for unit {unit} at time {time}")]
    Duplicate { unit: String, time: i64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unknown unit {0}")]
    UnknownUnit(String),

    #[error("empty cell {role:?} in stack g={g} (comparison {comparison}) at time {time:?}")]
    EmptyCell {
        g: i64,
        comparison: CohortLabel,
        role: Role,
        time: Option<i64>,
    },

    #[error("cell ({cohort}, eligible={eligible}) has no usable units")]
    EmptyPanelCell { cohort: CohortLabel, eligible: bool },

    #[error("no admissible comparison cohort for treated cohort {g}: {reason}")]
    InfeasibleStack { g: i64, reason: String },

    #[error("window error for cohort {g}: {message}")]
    Window { g: i64, message: String },

    #[error("infeasible cohorts: {0:?}")]
    InfeasibleCohorts(Vec<i64>),

    #[error("event-time {e} is not feasible for stack g={g}")]
    Infeasible { g: i64, e: i64 },

    #[error("no stack is feasible at event-time {0}")]
    NoFeasibleStack(i64),

    #[error("weight error: {0}")]
    Weight(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("collinear event-time indicators: {0:?}")]
    Collinearity(Vec<i64>),

    #[error("missing CATT for cohort {g} at event-time {ell} with nonzero weight")]
    Coverage { g: i64, ell: i64 },

    #[error("degenerate bootstrap band at event-time {0}: zero variance with nonzero draws elsewhere")]
    DegenerateBand(i64),

    #[error("degenerate pre-trend test: zero variance with nonzero estimate at g={g}, e={e}")]
    DegenerateTest { g: i64, e: i64 },

    #[error("demeaning did not converge after {iterations} iterations (last change {change:e})")]
    Convergence { iterations: usize, change: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by reading or writing files, as opposed to
    /// problems with the data or the requested design.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}
