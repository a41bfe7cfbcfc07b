//! Experiment driver for the matching network: configuration files, training
//! and evaluation runs, ablation tables, support-distance diagnostics, and
//! attention heatmaps.

pub mod commands;
pub mod config;
pub mod heatmap;
pub mod overrides;

pub use config::{DataSource, ExperimentConfig};
pub use heatmap::HeatmapRecord;
pub use overrides::Overrides;
