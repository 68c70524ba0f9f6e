//! Waveform-level simulator of a full-duplex massive-MIMO base station that
//! serves multi-user downlink OFDM traffic and, at the same time, tracks
//! radar targets from the reflections of its own transmit signal.
//!
//! The base station uses a partially-connected hybrid beamforming
//! architecture: each of the `N_RF` transmit (`M_RF` receive) chains drives
//! its own disjoint uniform-linear subarray through analog phase shifters
//! picked from a DFT codebook. Self-interference from the co-located,
//! simultaneously active transmitter is suppressed in three stages: analog
//! beam selection, a tap-limited analog canceller, and a digital canceller.
//!
//! Crate layout follows the signal path:
//!
//! * [`array`] — ULA geometry, steering vectors, DFT beam codebooks, and
//!   block-diagonal analog beamformer assembly.
//! * [`channel`] — near-field self-interference channel, target reflections
//!   on the OFDM grid, rank-1 downlink channels, and target state evolution.
//! * [`waveform`] — QPSK subframe grids and the TX/RX operations that move
//!   them through precoding, the radar channel, and baseband combining.
//! * [`canceller`] — tap-limited analog and unconstrained digital
//!   self-interference cancellers plus residual-power accounting.
//! * [`optimizer`] — the per-subframe beamformer design: analog beam
//!   selection, canceller placement, and block-diagonalized digital
//!   precoding with a saturation-driven stream-shrink loop.
//! * [`estimation`] — sample covariance, subspace DoA spectrum, per-target
//!   range estimation, and truth association/scoring.
//! * [`runner`] — the subframe tracking loop, rate/SNR metrics, and
//!   CSV/JSON export.
//! * [`config`] — scenario configuration, validation, and TOML loading.
//!
//! Angles are radians and powers are mW inside the library; the config and
//! record types translate to degrees/dBm at the boundary.

pub mod array;
pub mod canceller;
pub mod channel;
pub mod config;
pub mod error;
pub(crate) mod linalg;
pub mod estimation;
pub mod optimizer;
pub mod runner;
pub mod waveform;

pub use error::{Error, Result};

/// Dynamically sized complex matrix used throughout the crate.
pub type CMatrix = nalgebra::DMatrix<num_complex::Complex64>;
/// Dynamically sized complex column vector.
pub type CVector = nalgebra::DVector<num_complex::Complex64>;
