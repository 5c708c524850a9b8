//! Offline checks over finished runs and the step-count cost model.

pub mod costs;
pub mod requirements;
pub mod serial;
pub mod steps;

pub use requirements::{check_requirements, Check, LivenessScope, RequirementReport, Status};
pub use serial::{check_serializable, PrecedenceGraph, SerialError};
pub use steps::{expected_steps, monte_carlo_steps};
