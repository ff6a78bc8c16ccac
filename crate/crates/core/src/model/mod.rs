//! The attention-in-attention network and its ablation variants.

mod config;
mod network;

pub use config::{BlockMask, Fusion, ModelConfig, SkipInterp};
pub use network::{build_probe_model, param_count, BlockTrace, DynamicWeights, Model};
