//! Wait-k scheduling, prefix-to-prefix losses and a streaming evaluation
//! harness for one-to-many simultaneous speech translation.

pub mod agent;
pub mod harness;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod scalar;
pub mod stream;

pub use scalar::Real;

pub type CountModel = model::CountPrefixModel<f64>;
pub type CountModelF32 = model::CountPrefixModel<f32>;
pub type TrainedModel = model::MultilingualModel<CountModel>;
