//! Associative recall: synthetic data, a small model built from MoM layers,
//! training, and multi-seed comparisons between model variants.

pub mod model;
pub mod optim;
pub mod task;
pub mod train;

pub use model::{evaluate, loss_and_grad, ModelConfig, ModelKind, RecallModel};
pub use optim::{AdamW, OptimConfig};
pub use task::{gen_recall_dataset, RecallDataset, RecallSequence, RecallTaskConfig};
pub use train::{compare, run_experiment, train, CompareReport, ExperimentConfig, Precision, RunRecord};
