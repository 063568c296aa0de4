//! Person-specific adversarial privacy masks for face images.
//!
//! A generator network is trained in two stages (image-specific, then
//! person-specific) against a locally trained surrogate recogniser, so that a
//! single additive mask per identity hides all of that person's photos from
//! unseen recognition models. The crate also contains the comparison
//! baselines and the open-set identification harness used to measure
//! protection.

pub mod advnet;
pub mod artifact;
pub mod baselines;
pub mod config;
pub mod dataio;
pub mod embedder;
pub mod error;
pub mod evalharness;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod subspace;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
