//! SAFR workbench: a single-layer transformer text classifier with
//! superposition-aware feature regularization, the metrics behind it,
//! deletion-based interpretability evaluation, and SVG visualizations.

pub mod autograd;
pub mod config;
pub mod data;
pub mod eval;
pub mod loss;
pub mod model;
pub mod repr_metrics;
pub mod rng;
pub mod synth;
pub mod train;
pub mod viz;
pub mod vmask;
