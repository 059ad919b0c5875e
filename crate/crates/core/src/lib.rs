//! Query-selected attention for contrastive unpaired image translation.

pub mod ablation;
pub mod attn;
pub mod config;
pub mod contrast;
pub mod data;
pub mod error;
pub mod heatmap;
pub mod metrics;
pub mod nets;
pub mod params;
pub mod train;

pub use error::{QsError, Result};
