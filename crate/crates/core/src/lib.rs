//! Submodular-information objectives for few-shot representation learning.
//!
//! The crate has two halves. The first is a numerical toolkit around
//! pairwise-similarity set functions: similarity kernels with analytic
//! gradients ([`kernel`]), facility-location and graph-cut set functions with
//! exhaustive verification oracles ([`setfn`]), closed-form submodular
//! mutual information ([`smi`]), and differentiable combinatorial loss
//! functions built from them ([`loss`]). The second is a desk-scale two-stage
//! few-shot learning harness on synthetic Gaussian cluster tasks: data
//! generation ([`data`]), a small projection head ([`head`]), seeded SGD
//! training ([`train`]), metrics for confusion / forgetting / cluster
//! geometry / convergence ([`metrics`]), and a multi-arm experiment driver
//! ([`experiment`]). The [`propsuite`] module bundles every exhaustive and
//! randomized law into one runnable gate.
//!
//! Everything is deterministic: given the same seeds and configuration,
//! every run reproduces the same numbers byte for byte.

pub mod data;
pub mod error;
pub mod experiment;
pub mod head;
pub mod kernel;
pub mod loss;
pub mod metrics;
pub mod propsuite;
pub mod setfn;
pub mod smi;
pub mod train;

pub use data::{FewShotTask, Split, SyntheticTaskSpec};
pub use error::{Error, Result};
pub use experiment::{AblateConfig, ArmSpec, ExperimentConfig, ExperimentOutcome};
pub use head::ProjectionHead;
pub use kernel::{EmbeddingMatrix, KernelSpec, SimilarityMatrix};
pub use loss::{LossConfig, LossResult};
pub use metrics::MetricsReport;
pub use propsuite::{run_property_suite, PropertyReport};
pub use setfn::{ClassPartition, GroundSet, SetFunctionSpec};
pub use train::{AdaptObjective, Stage, TrainConfig, TrainLog};
