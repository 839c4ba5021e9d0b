//! Desk-scale laboratory for slowdown attacks on multi-exit networks.
//!
//! The crate trains small multi-exit models, calibrates early-exit policies,
//! crafts slowdown and misclassification perturbations, measures early-exit
//! efficacy, and simulates edge-cloud model partitioning.

pub mod attacks;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod multiexit;
pub mod partition;
pub mod policy;
pub mod tensor;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::{Layer, Tensor};
pub use multiexit::{CostModel, ExitHead, MultiExitNetwork};
pub use policy::{ExitPolicy, InferenceRecord, StopCriterion, Threshold};
pub use metrics::{EecCurve, EvalReport};
pub use attacks::{AttackConfig, AttackScope, NormKind, PerturbationBudget, TargetDistribution, TargetMode};
pub use dataset::Dataset;
