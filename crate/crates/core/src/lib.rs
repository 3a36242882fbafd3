//! Synthetic model combination.
//!
//! Given pre-trained experts and information about the data each was trained
//! on, learn a low-dimensional representation in which every expert's domain
//! has a density, then combine the experts per instance with weights
//! proportional to those densities.
//!
//! The pipeline, end to end:
//!
//! 1. [`density`]: turn each expert's information into a feature-space density.
//! 2. [`representation`]: train an encoder/decoder on the test features and on
//!    draws from those densities.
//! 3. [`weights`]: refit each density in the latent space and weight experts by
//!    their relative latent density at a query point.
//! 4. [`ensembles`]: combine expert predictions with those weights, or with one
//!    of the global baselines.

pub mod cli;
pub mod cohort;
pub mod data;
pub mod density;
pub mod ensembles;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod representation;
pub mod rng;
pub mod weights;

pub use data::{Dataset, Matrix};
pub use density::{DensityModel, DimSpec, ModelInfo};
pub use error::{Result, SmcError};
pub use model::{Expert, ModelBundle, OutputKind, Prediction};
