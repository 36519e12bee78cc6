//! Stacked triple-differences event-study estimation for staggered
//! adoption panels with a binary eligibility dimension.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod panel;
pub mod simulation;
pub mod stacks;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use estimators::{EventStudyResult, StackAttTable, WeightScheme};
pub use panel::{CohortLabel, PanelDataset, Schema, UnitRecord};
pub use stacks::{ComparisonRule, Role, Stack, StackDesign};
