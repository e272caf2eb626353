//! Semi-supervised instance segmentation training on pseudo-sequences:
//! the training loop, ablation drivers and density reports.

pub mod ablation;
pub mod config;
pub mod data;
pub mod density;
pub mod error;
pub mod run;
pub mod trainer;

pub use config::{DataConfig, EmbedConfig, NegativeSource, TrainConfig};
pub use data::Experiment;
pub use error::{Result, TrainError};
pub use run::{train, train_with, RunReport, TrainOutcome};
pub use trainer::{evaluate, Split, StepLosses, StepRecord, Trainer};
