//! Continual learning under dataset bias.
//!
//! The crate trains small dense networks on synthetic task streams whose
//! training sets carry a controllable spurious correlation between a group
//! attribute and the class label. It bundles the usual continual-learning
//! baselines (fine-tuning, model freezing, online EWC, LwF, experience
//! replay, PackNet, GDumb), the Group DRO objective, group-class balanced
//! greedy sampling with head retraining, and the measurements used to study
//! how bias moves between tasks: forgetting, intransigence, bias-flipped
//! misclassification rate (BMR), difference of classwise accuracy (DCA) and
//! linear CKA.
//!
//! Module map:
//!
//! - [`nn`]: MLP with a shared trunk and classification heads, manual
//!   backprop, AdamW with a cosine schedule, cross-entropy and distillation.
//! - [`stream`]: biased task-stream generation and scenario presets.
//! - [`memory`]: reservoir, class-balanced and group-class balanced memories.
//! - [`trainers`]: per-method continual-learning procedures.
//! - [`metrics`]: accuracy matrices and bias metrics.
//! - [`runner`]: run configs, sweeps, persisted records and reports.

pub mod error;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod runner;
pub mod seed;
pub mod stream;
pub mod trainers;

pub use error::{Error, Result};
pub use memory::{ExemplarMemory, MemoryKey};
pub use metrics::{AccuracyMatrix, MetricBundle};
pub use nn::{AdamWConfig, AdamWState, Batch, HeadMode, MlpModel};
pub use runner::{RunConfig, RunRecord};
pub use stream::{BiasedSample, Scenario, TaskSpec, TaskStream};
pub use trainers::{HyperConfig, Method, TrainerState};
