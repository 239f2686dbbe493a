//! Two-layer decoding for multi-cell Massive MIMO uplinks.
//!
//! Each base station first combines its own users with a local linear
//! combiner (MRC or RZF). A central unit then applies large-scale fading
//! decoding (LSFD): per-user weights across all cells that reuse the same
//! pilot, built from channel statistics only. The crate covers
//!
//! - [`scenario`]: wrapped-around cell geometry, path loss, shadowing and
//!   exponential spatial correlation,
//! - [`channel`]: correlated Rayleigh sampling, the pilot phase, MMSE and
//!   element-wise MMSE estimation,
//! - [`se`]: closed-form MRC spectral efficiency, optimal LSFD and the
//!   Monte Carlo machinery for arbitrary combiners,
//! - [`optimizer`]: weighted-MMSE joint power control and LSFD design,
//! - [`verify`]: Monte Carlo oracles for the closed-form expressions.

pub mod channel;
pub mod error;
pub mod linalg;
pub mod optimizer;
pub mod rng;
pub mod scenario;
pub mod se;
pub mod verify;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
