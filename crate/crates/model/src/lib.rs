//! A small query-based instance segmentation network on candle. Each query
//! yields class probabilities, a normalized box, a full-resolution soft mask
//! and an association embedding.

mod checkpoint;
pub mod config;
mod detect;
pub mod error;
pub mod model;
pub mod output;

pub use checkpoint::{FORMAT_VERSION, MAGIC};
pub use config::ModelConfig;
pub use error::{ModelError, Result};
pub use model::{ParamStore, SegModel};
pub use output::{box_logit_grad, decode_box, postprocess, sigmoid, DetectConfig, ModelOutput};
