//! Multimodal frequency-driven change detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, reverse-mode differentiation, AdamW, checkpoints
//! * [`wavelet`] / [`spectral`]: Haar analysis of feature maps, DFT of text embeddings
//! * [`dfc`]: sparsity-scheduled high-frequency fusion and cross-temporal low-frequency fusion
//! * [`tff`]: prompt rendering, embedding providers, graph filtering and feature modulation
//! * [`backbone`] / [`pipeline`]: the siamese network, training loop and inference
//! * [`metrics`] / [`datakit`]: evaluation harness and the synthetic bi-temporal corpus
//! * [`cli`]: the `mfdcd` command-line front end

pub mod backbone;
pub mod cli;
pub mod datakit;
pub mod dfc;
pub mod error;
mod layers;
pub mod metrics;
pub mod pipeline;
mod selftest;
pub mod spectral;
pub mod tensor;
pub mod tff;
pub mod wavelet;

pub use error::{Error, Result};

/// Acquisition time of one image of a bi-temporal pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Phase {
    T1,
    T2,
}

impl Phase {
    pub const BOTH: [Phase; 2] = [Phase::T1, Phase::T2];

    pub fn other(self) -> Phase {
        match self {
            Phase::T1 => Phase::T2,
            Phase::T2 => Phase::T1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Phase::T1 => 0,
            Phase::T2 => 1,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::T1 => "T1",
            Phase::T2 => "T2",
        })
    }
}
