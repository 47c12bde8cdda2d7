//! Query-centric few-shot segmentation.
//!
//! A support prototype locates a confident seed region in the query; an
//! object mining network grows the seed to the whole object using the
//! query's own features, and an adversarially trained detail mining network
//! sharpens the predicted mask. Episodic synthetic data, metrics and study
//! protocols are included.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod detail_miner;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod localizer;
pub mod model;
mod nn;
pub mod object_miner;
pub mod records;
pub mod training;
pub mod types;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{EpisodePrediction, Model, ModelConfig};
pub use types::{cosine, flatten_spatial, unflatten_spatial, Episode, FeatureMap, FeatureVector, Mask, MaskKind, RngStream};
