//! Metasurface front-ends for opto-electronic CNNs.
//!
//! A trained network's first convolution layer is reproduced optically: each
//! signed kernel is split into non-negative halves, every half gets its own
//! phase-only metasurface whose Fresnel PSF is fitted to it directly, and the
//! two sensor measurements are subtracted electronically.
//!
//! Modules, bottom-up:
//! - [`fieldcore`]: grids, apertures, phase and modulation profiles
//! - [`propagate`]: single-FFT Fresnel propagation and PSF extraction
//! - [`kernels`]: signed split, array planning, target embedding
//! - [`adjoint`]: kernel-matching loss and its analytic phase gradient
//! - [`dko`]: per-element optimizer and the layer driver
//! - [`capture`]: simulated measurement, pair subtraction, electronic reference
//! - [`eval`]: kernel and depth metrics
//! - [`bench`]: parameter accounting and step timing, including a toy
//!   end-to-end baseline
//! - [`tensorio`]: NPY, PGM/PPM/PFM, JSON config and report I/O

pub mod adjoint;
pub mod bench;
pub mod capture;
pub mod dko;
pub mod error;
pub mod eval;
pub mod fft;
pub mod fieldcore;
pub mod kernels;
pub mod propagate;
pub mod selftest;
pub mod tensorio;

pub use error::{Error, ErrorCategory, Result};
