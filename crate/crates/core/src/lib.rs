//! Partition function estimation and sampling for Ising models whose
//! interaction matrix is a bounded bulk plus a few outlier eigenvalues.
//!
//! The pipeline: [`spectral::decompose`] splits `J`; [`hs_grid`] lays a
//! grid over the positive-spike directions; per cell, [`tilt`] neutralizes
//! the negative part and [`annealing`] estimates the cell's partition
//! function along a Glauber-sampled temperature ladder; [`tempering`]
//! turns the ladder into a sampler. [`oracle`] enumerates small models
//! exactly for testing.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annealing;
pub mod error;
pub mod glauber;
pub mod hs_grid;
pub mod model;
pub mod models;
pub mod numeric;
pub mod oracle;
pub mod rng;
pub mod spectral;
pub mod tempering;
pub mod tilt;

pub use error::{IsingError, Result};
pub use model::{IsingModel, ModelFile, ModelMeta, SpinConfig};
pub use oracle::DiscreteDistribution;
pub use rng::SeedTree;
pub use spectral::SpectralSplit;
