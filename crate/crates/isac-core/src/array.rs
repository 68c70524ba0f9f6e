//! Uniform linear arrays, steering vectors, DFT beam codebooks, and
//! block-diagonal analog beamformer assembly.
//!
//! All arrays are ULAs along the x axis. Element `i` of an array with
//! spacing `d` and offset `x0` sits at `x0 + i * d`; steering vectors use
//! the narrowband far-field phase model with the convention that the phase
//! *decreases* along the array for positive angles.

use num_complex::Complex64;
use std::f64::consts::{PI, TAU};

use crate::{CMatrix, CVector, Error, Result};

/// Geometry of a uniform linear array.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    /// Number of elements.
    pub n_elements: usize,
    /// Inter-element spacing in meters.
    pub element_spacing: f64,
    /// Carrier wavelength in meters.
    pub wavelength: f64,
    /// Position of element 0 along the array axis, in meters.
    pub array_offset: f64,
}

impl ArrayGeometry {
    /// Half-wavelength-spaced ULA starting at the origin.
    pub fn half_wavelength(n_elements: usize, wavelength: f64) -> Self {
        ArrayGeometry {
            n_elements,
            element_spacing: wavelength / 2.0,
            wavelength,
            array_offset: 0.0,
        }
    }

    /// Same geometry shifted along the array axis.
    pub fn with_offset(mut self, array_offset: f64) -> Self {
        self.array_offset = array_offset;
        self
    }

    /// Axis position of element `i` in meters.
    pub fn element_position(&self, i: usize) -> f64 {
        self.array_offset + i as f64 * self.element_spacing
    }
}

/// Unit-norm steering vector of the array toward angle `theta` (radians,
/// measured from broadside): entry `i` is
/// `exp(-j * 2 pi / lambda * i * d * sin(theta)) / sqrt(n)`.
pub fn steering_vector(geometry: &ArrayGeometry, theta: f64) -> CVector {
    let scale = 1.0 / (geometry.n_elements as f64).sqrt();
    let phase_step = -TAU / geometry.wavelength * geometry.element_spacing * theta.sin();
    CVector::from_fn(geometry.n_elements, |i, _| {
        Complex64::from_polar(scale, phase_step * i as f64)
    })
}

/// A set of constant-modulus analog beams for one subarray.
#[derive(Debug, Clone)]
pub struct BeamCodebook {
    /// Candidate beams, each of length `n_subarray` with unit norm.
    pub beams: Vec<CVector>,
    /// Codebook resolution; `beams.len() == 2^bits`.
    pub bits: u32,
}

impl BeamCodebook {
    pub fn n_beams(&self) -> usize {
        self.beams.len()
    }

    /// Subarray size the beams are built for.
    pub fn beam_len(&self) -> usize {
        self.beams.first().map_or(0, |b| b.len())
    }

    /// All beams stacked as the columns of an `n_subarray x n_beams` matrix.
    pub fn beams_matrix(&self) -> CMatrix {
        let mut m = CMatrix::zeros(self.beam_len(), self.n_beams());
        for (k, beam) in self.beams.iter().enumerate() {
            m.set_column(k, beam);
        }
        m
    }
}

/// Oversampled DFT codebook: `2^bits` beams whose spatial frequencies
/// `sin(theta_k) = -1 + 2k / 2^bits` tile the full visible region. Every
/// entry has modulus `1 / sqrt(n_subarray)`; with `2^bits == n_subarray`
/// the codebook is an orthonormal (critically sampled) DFT basis.
pub fn dft_codebook(bits: u32, n_subarray: usize) -> BeamCodebook {
    let n_beams = 1usize << bits;
    let scale = 1.0 / (n_subarray as f64).sqrt();
    let beams = (0..n_beams)
        .map(|k| {
            let sin_theta = 2.0 * k as f64 / n_beams as f64 - 1.0;
            CVector::from_fn(n_subarray, |i, _| {
                Complex64::from_polar(scale, -PI * i as f64 * sin_theta)
            })
        })
        .collect();
    BeamCodebook { beams, bits }
}

/// Block-diagonal analog beamforming matrix of a partially-connected hybrid
/// array: chain `r` drives its own `n_subarray`-element subarray with one
/// phased beam, so the assembled matrix is `(r * n_subarray) x r` with the
/// per-chain beams on the block diagonal and zeros elsewhere.
#[derive(Debug, Clone)]
pub struct AnalogBeamformer {
    /// One beam per RF chain, each of length `n_subarray`.
    pub per_chain_beams: Vec<CVector>,
    /// Assembled `(n_chains * n_subarray) x n_chains` block-diagonal matrix.
    pub assembled: CMatrix,
}

impl AnalogBeamformer {
    pub fn n_chains(&self) -> usize {
        self.per_chain_beams.len()
    }

    pub fn n_subarray(&self) -> usize {
        self.per_chain_beams.first().map_or(0, |b| b.len())
    }

    /// Total number of array elements driven by the beamformer.
    pub fn n_elements(&self) -> usize {
        self.assembled.nrows()
    }
}

/// Place one beam per chain on the block diagonal.
///
/// Fails if no beams are given or the beams disagree in length.
pub fn assemble_analog(per_chain_beams: Vec<CVector>) -> Result<AnalogBeamformer> {
    let n_sub = per_chain_beams
        .first()
        .map(|b| b.len())
        .ok_or_else(|| Error::InvalidInput("analog beamformer needs at least one chain".into()))?;
    if n_sub == 0 {
        return Err(Error::InvalidInput("analog beams must be non-empty".into()));
    }
    if per_chain_beams.iter().any(|b| b.len() != n_sub) {
        return Err(Error::InvalidInput("per-chain beams disagree in length".into()));
    }
    let n_chains = per_chain_beams.len();
    let mut assembled = CMatrix::zeros(n_chains * n_sub, n_chains);
    for (r, beam) in per_chain_beams.iter().enumerate() {
        assembled.view_mut((r * n_sub, r), (n_sub, 1)).copy_from(beam);
    }
    Ok(AnalogBeamformer { per_chain_beams, assembled })
}
