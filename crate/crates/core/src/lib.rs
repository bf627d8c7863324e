//! Federated segmentation simulator with inside and outside model
//! personalization.
//!
//! Inside the federation, each client maintains a local adapted model that
//! accumulates both its own summed local gradients and the server-aggregated
//! global gradients. For clients outside the federation, the trained
//! personalized models plus the global model form a routing space; small
//! input-conditioned coefficient networks mix them layer-wise and are tuned
//! at test time with an unsupervised consistency/shape/entropy objective on
//! unlabeled data.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod outside;
pub mod personalize;
pub mod report;
pub mod routing;
pub mod ttloss;

pub use error::{Result, SimError};
