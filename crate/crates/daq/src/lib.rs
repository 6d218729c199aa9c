//! RGB-D video salient object detection at desk scale: a frozen
//! hierarchical encoder fine-tuned through depth-guided parallel adapters,
//! a query-driven temporal memory in place of prompts and memory banks, a
//! prompt-free mask decoder, the standard saliency metrics, PEFT baselines
//! with a training-memory bench, deterministic synthetic data, and a
//! training/ablation harness.

mod attn;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod memtrack;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod peft;
pub mod qtm;

pub use config::{Config, EmbeddingMode, UpdateStrategy};
pub use error::{Error, Result};
pub use model::DaqModel;
