//! Mixture-of-complexity-experts image restoration.
//!
//! A self-contained f64 implementation of an all-in-one restoration network
//! built from nested "complexity experts": expert blocks of increasing
//! embedding width and window size, selected per image by a noisy top-1
//! router that is biased toward cheap experts through a complexity-aware
//! auxiliary loss. The crate ships its own tape-based reverse-mode autodiff,
//! radix-2 FFT, synthetic degradation generators, metrics, a deterministic
//! trainer and a small CLI (`moce`).

pub mod cli;
pub mod degradations;
pub mod error;
pub mod metrics;
pub mod moce;
pub mod network;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{MoceError, Result};
