//! Long-tail trajectory prediction: offline trajectory clustering, gated
//! prototypical contrastive learning and a hypernetwork-modulated decoder.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`.

pub mod checkpoint;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod kalman;
pub mod numeric;
pub mod pcl;
pub mod predictor;
pub mod scalar;
pub mod training;
pub mod trajdata;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numeric::Tensor<f64>;
pub type Tape = numeric::Tape<f64>;
pub type ParamSet = numeric::ParamSet<f64>;
pub type TrajectorySample = trajdata::TrajectorySample<f64>;
pub type DatasetSplit = trajdata::DatasetSplit<f64>;
pub type ClusterModel = cluster::ClusterModel<f64>;
pub type FeatureBank = pcl::FeatureBank<f64>;
pub type ExtractorParams = extractor::ExtractorParams<f64>;
pub type PredictorParams = predictor::PredictorParams<f64>;
pub type PredictionSet = predictor::PredictionSet<f64>;
pub type SampleMetrics = eval::SampleMetrics<f64>;
