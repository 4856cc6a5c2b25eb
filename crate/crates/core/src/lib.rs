//! Fine-grained prompt tuning: a frozen high-resolution ViT feeds selected
//! per-layer keys and values into a small learnable side network through
//! prompt cross-attention.

mod binio;
pub mod backbone;
pub mod block;
pub mod cache;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod init;
pub mod metrics;
pub mod selection;
pub mod trainer;

pub use backbone::{Backbone, LayerTap};
pub use cache::{build_cache, config_hash, FeatureCache, FeatureCacheEntry};
pub use config::{FptConfig, TrainMode};
pub use error::{FptError, Result};
pub use fusion::{Checkpoint, FusionBatch, SideNetwork, SideShape};
pub use metrics::{EfficiencyReport, MemoryEstimate, MemoryMode, ParamInventory};
pub use selection::{LayerFusionFeatures, TokenSelection};
pub use trainer::{evaluate, freeze_check, FeatureSource, FptModel, TrainReport, Trainer};
