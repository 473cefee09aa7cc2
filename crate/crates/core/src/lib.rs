//! Robustified risk measures on finite probability spaces.

pub mod acceptance;
pub mod allocation;
pub mod config;
pub mod duality;
pub mod error;
pub mod measures;
pub mod prob;
pub mod report;
pub mod robust;
pub mod sampling;
pub mod scenario;
pub mod uncertainty;
pub mod verdict;

pub use error::{Error, Result};
pub use measures::{AxiomFlags, LossFunction, RiskFunctional, RiskMeasure};
pub use prob::{ExtReal, Position, ProbSpace, ScenarioMeasure};
pub use uncertainty::{Family, FamilyProperty};
pub use verdict::{PropertyVerdict, Witness};
