//! Aggregation of binary local descriptors into global image signatures.
//!
//! The crate covers the whole retrieval chain for bit-string descriptors
//! such as ORB or AKAZE:
//!
//! - [`descriptor`]: bit-packed storage and the Hamming/Euclidean kernels
//! - [`clustering`]: k-means, k-majority and k-medoids vocabularies
//! - [`mixture`]: Bernoulli and Gaussian mixtures fitted by EM
//! - [`encode`]: BoW, VLAD, GMM Fisher vectors and Bernoulli-mixture Fisher vectors
//! - [`postproc`]: power-law and L2 normalization, PCA
//! - [`retrieval`]: ranking, tf-idf, distance fusion, direct matching, mAP
//! - [`io`], [`config`], [`pipeline`]: file formats and reproducible runs
//! - [`synth`]: Bernoulli-mixture sampling and labelled test corpora

pub mod clustering;
pub mod config;
pub mod descriptor;
pub mod encode;
pub mod error;
pub mod io;
pub mod mixture;
mod parallel;
pub mod pipeline;
pub mod postproc;
pub mod retrieval;
pub mod synth;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used by every seeded routine in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
