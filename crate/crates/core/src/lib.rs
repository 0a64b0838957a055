pub mod codebook;
pub mod config;
pub mod data;
pub mod error;
pub mod hvq;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pot;
pub mod scoring;
pub mod switching;
pub mod training;
pub mod transformer;

#[cfg(test)]
mod testutil;

pub use codebook::Codebook;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use hvq::HierarchyMode;
pub use model::{HvqTrans, ModelConfig};
pub use pipeline::{Checkpoint, EvalOptions, Report};
pub use pot::{SinkhornConfig, TransportPlan};
pub use training::{LossBreakdown, TrainConfig};

/// Per-image token matrix (`N` tokens × `C` channels).
pub type TokenGrid = ndarray::Array2<f64>;
