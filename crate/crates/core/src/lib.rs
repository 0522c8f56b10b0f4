//! Continual source-free universal domain adaptation on synthetic streams.
//!
//! A mean-teacher pair adapts a pretrained source network batch by batch.
//! Teacher features feed a streaming class-conditional Gaussian mixture whose
//! likelihoods drive dual-threshold pseudo-labels (known / unknown /
//! ignored). The student is trained with a contrastive, an entropy and two
//! consistency terms; predictions ensemble student and teacher and reject
//! samples whose OOD score exceeds the midpoint threshold.

pub mod datagen;
pub mod engine;
pub mod error;
pub mod gmmstream;
pub mod losses;
pub mod meanteacher;
pub mod metrics;
pub mod netcore;
pub mod pseudolabel;
pub mod suite;

pub use error::{Error, Result};
