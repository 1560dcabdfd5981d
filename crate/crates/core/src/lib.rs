//! Mid-price movement forecasting from level-II limit order books.
//!
//! The pipeline: ingest or synthesize day-grouped book snapshots, turn
//! them into order-flow / raw-book training windows, fit a family of
//! sequence models (plus shared-weight twin-encoder variants) with a
//! from-scratch reverse-mode engine, walk the splits forward, and score
//! the grid.

pub mod autodiff;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod lob;
pub mod models;
pub mod rng;
pub mod scalar;
pub mod training;
pub mod verification;

pub use scalar::Scalar;

/// Concrete f64 instantiations used by the pipeline.
pub type Array = autodiff::Array<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type Tensor = autodiff::Tensor<f64>;
pub type ParamSet = autodiff::ParamSet<f64>;
pub type GradMap = autodiff::GradMap<f64>;
pub type AdamState = autodiff::AdamState<f64>;
pub type AdamConfig = autodiff::AdamConfig<f64>;
pub type Sample = features::Sample<f64>;
pub type Dataset = features::Dataset<f64>;
pub type Model = models::Model<f64>;
