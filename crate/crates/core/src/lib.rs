//! ECG biometric authentication pipeline.
//!
//! Raw single-lead ECG is filtered, downsampled, noised and normalized
//! ([`signal`]), cut into R-centered beats ([`beats`]), turned into Morlet
//! scalogram images ([`scalogram`]) and classified by a depthwise-separable
//! CNN feeding a GRU ([`model`], built on the small autodiff engine in
//! [`numerics`]). [`training`], [`metrics`], [`adversarial`] and
//! [`federated`] cover supervised training, biometric metrics, FGSM
//! robustness sweeps and FedAvg simulation. [`data_io`] holds the on-disk
//! formats and the synthetic multi-subject generator, [`pipeline`] turns
//! records into labelled images.

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod beats;
pub mod data_io;
pub mod error;
pub mod experiment;
pub mod federated;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod scalogram;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, ParameterSet};
pub use numerics::Tensor;
pub use signal::EcgRecord;
