//! Return-conditioned behavioral cloning with return-based trajectory
//! weighting and conservative regularization.
//!
//! The pipeline: build an [`data::OfflineDataset`], derive a
//! [`weighting::BinLayout`], train an [`policy::RvsPolicy`] with
//! [`trainer::train`] and roll it out with [`eval::rollout_conditioned`].

pub mod conservatism;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod report;
pub mod rng;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
