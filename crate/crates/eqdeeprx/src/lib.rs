//! Link-level MIMO-OFDM simulation and a hybrid classical/neural receiver.
//!
//! The crate is organized in layers that mirror a receive chain:
//!
//! - [`tensor`]: a small real-valued tensor engine with reverse-mode
//!   autodiff plus the complex linear-algebra kernels the equalizers need.
//! - [`linksim`]: slot generation — QAM mapping, DMRS pilot patterns,
//!   tapped-delay Rayleigh channels, inter-cell interference and noise.
//! - [`rx`]: the conventional receiver (LS channel estimation,
//!   interpolation/smoothing, shrinkage-based interference covariance
//!   estimation, RZF/LMMSE/MF equalization, exact LLR demapping).
//! - [`nn`]: the learned receiver blocks (pilot denoiser, per-layer
//!   detector, per-RE demapper) and the full hybrid forward pass.
//! - [`train`]: composite loss, activation-moment regularizer and the
//!   optimization loop with online data generation.
//! - [`eval`]: BER sweep harness with SINR binning, FLOPs accounting and
//!   spectral-efficiency computation.

pub mod config;
pub mod error;
pub mod eval;
pub mod linksim;
pub mod nn;
pub mod rx;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
