//! Class-conditional, two-stage generation of part-based object layouts.
//!
//! The first stage ([`boxvae`]) is a conditional VAE over part graphs: a
//! feature matrix of presence bits and part boxes plus a part adjacency
//! matrix, encoded with a graph convolutional network ([`gcn`]). The second
//! stage ([`labelmapvae`]) is a conditional VAE over sequences of per-part
//! masks, conditioned on the boxes of the first stage. Decoded masks are
//! pasted into their boxes to form a per-pixel part label map.
//!
//! [`training`] holds the ELBO objective, the cyclic KL schedule with the
//! train/validation gap freeze, and the training loop. [`baselines`] has
//! three comparison models and [`pipeline`] wires everything together for
//! generation and interactive editing.

pub mod baselines;
pub mod boxvae;
pub mod dataset;
mod error;
pub mod eval;
pub mod exec;
pub mod gcn;
pub mod geometry;
pub mod labelmapvae;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod training;

pub use error::{Error, Result};
pub use exec::Execution;
pub use geometry::BBox;
pub use raster::Raster;

pub use candle_core::DType;

/// Dimension of every latent space in the system.
pub const LATENT_DIM: usize = 128;

/// Side length of the fixed-resolution per-part masks.
pub const MASK_SIZE: usize = 64;
