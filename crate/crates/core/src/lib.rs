//! Fingerprint embeddings from minutia sets with a two-level graph neural
//! network.
//!
//! A fingerprint is a set of [`graph::Minutia`]. The minutia-level network
//! runs EdgeConv layers over each fingerprint's spatial k-NN graph and pools
//! the result into one vector; the fingerprint-level network refines a batch
//! of those vectors over a k-NN graph of the batch and returns unit-norm
//! embeddings compared by inner product. Training uses triplet loss with
//! online mining.
//!
//! Everything runs in `f64` on a small reverse-mode tape ([`numeric::Tape`]).

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod io;
pub mod layers;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
