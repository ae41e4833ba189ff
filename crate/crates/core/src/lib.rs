// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoders with a low-rank polynomial decoder.
//!
//! The encoder is the usual linear map, ReLU and Top-K style sparsifier.
//! The decoder adds quadratic and cubic terms in the sparse code, all routed
//! through one shared orthonormal projection, so feature pairs and triples
//! get their own (implicit) dictionary columns at a small parameter cost.
//!
//! Modules:
//! - [`linalg`]: dense matrices, positive Householder QR, seeded RNG
//! - [`sparsify`]: Top-K, BatchTopK and Matryoshka prefix masks
//! - [`model`]: parameters, encode/decode, implicit dictionaries, counts
//! - [`train`]: gradients, Adam with clipping, Stiefel retraction, loop
//! - [`baseline`]: independent plain linear Top-K SAE
//! - [`synth`]: synthetic activations with planted interactions
//! - [`eval`]: MSE, sparse probing, class-conditional Wasserstein distance
//! - [`interactions`]: pair/triple strengths, co-occurrence, correlations
//! - [`io`]: corpus, checkpoint, labels and config files

pub mod baseline;
pub mod error;
pub mod eval;
pub mod interactions;
pub mod io;
pub mod linalg;
pub mod model;
pub mod sparsify;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{Matrix, Rng};
pub use model::{ModelConfig, PolySaeParams, Ranks, SparseCode};
pub use sparsify::Sparsifier;
pub use train::TrainConfig;
