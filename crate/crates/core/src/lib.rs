//! Encoder-only transformers for integer arithmetic: digit-string ground truth,
//! task generation, a small autodiff engine, the model, its trainer and the
//! evaluation metrics used to study length generalization.

pub mod analysis;
pub mod digitcore;
pub mod engine;
pub mod model;
pub mod rng;
pub mod taskgen;
pub mod trainer;

pub use analysis::{FailureReport, MetricRow};
pub use digitcore::DigitString;
pub use engine::Scalar;
pub use model::{ModelConfig, ModelParams, PeKind, SizePreset};
pub use taskgen::{Example, TaskKind, TaskSpec, TrainPlan};
pub use trainer::{OptimConfig, RunRecord, Schedule};
