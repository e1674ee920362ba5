//! Anomaly-aware vision-language model for lesion detection, progression
//! and grounding on synthetic scans.

pub mod ablation;
pub mod anomaly;
pub mod backbone;
pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod image;
pub mod lm;
pub mod model;
pub mod nn;
pub mod params;
pub mod report;
pub mod sequence;
pub mod textgen;
pub mod train;
pub mod vocab;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::LesionLm;
pub use params::{Group, ParamStore};
