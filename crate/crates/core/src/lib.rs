//! Linear transformers trained on in-context linear regression, with the
//! oracles and diagnostics used to check them.
//!
//! Everything numeric is generic over [`scalar::Scalar`]; the aliases below
//! fix it to `f64`.

pub mod checks;
pub mod cli_io;
pub mod closed_form;
pub mod error;
pub mod gd_oracle;
pub(crate) mod kernels;
pub mod landscape;
pub mod linalg;
pub mod loss;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};

pub type Matrix = linalg::Matrix<f64>;
pub type CovarianceSpec = sampler::CovarianceSpec<f64>;
pub type Prompt = sampler::Prompt<f64>;
pub type Batch = loss::Batch<f64>;
pub type TransformerParams = transformer::TransformerParams<f64>;
pub type GradientBundle = loss::GradientBundle<f64>;
pub type SingleLayerParams = loss::SingleLayerParams<f64>;
pub type OptimalSingleLayer = closed_form::OptimalSingleLayer<f64>;
pub type FlowRecord = landscape::FlowRecord<f64>;
pub type RunRecord = trainer::RunRecord<f64>;
