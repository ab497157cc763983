//! Normal behaviour models for wind-turbine gearbox bearing temperatures and
//! the window-based evaluation of the alarms they raise.
//!
//! The pipeline runs: SCADA ingestion or simulation ([`scada_data`],
//! [`simulator`]) → design matrices ([`features`]) → gradient-boosted trees
//! ([`gbdt`]) trained under the fault-exclusion protocol ([`nbm`]) → residual
//! thresholding ([`detection`]) → precision/recall scoring ([`evaluation`]).
//! [`experiment`] wires the stages together.

pub mod detection;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod gbdt;
pub mod nbm;
pub mod scada_data;
pub mod simulator;

pub use error::{Error, Result};
