//! Propagation models: the near-field self-interference channel between the
//! co-located TX and RX arrays, per-subcarrier radar reflection channels,
//! rank-1 downlink user channels, and target state evolution.

use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::TAU;

use crate::array::{steering_vector, ArrayGeometry};
use crate::{CMatrix, Error, Result};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Downlink-user role attached to a radar target that doubles as the
/// dominant scatterer of a served user.
#[derive(Debug, Clone, PartialEq)]
pub struct DlScatterer {
    /// Index of the served user.
    pub user_index: usize,
    /// Arrival angle at the user array in radians (static per run).
    pub user_doa: f64,
    /// Complex downlink gain; magnitude encodes pathloss, phase is redrawn
    /// every subframe.
    pub gain: Complex64,
}

/// State of one radar target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetState {
    /// Direction of arrival/departure at the base station, radians.
    pub doa: f64,
    /// Range in meters.
    pub range: f64,
    /// Two-way propagation delay in seconds, `2 * range / c`.
    pub delay: f64,
    /// Complex reflection coefficient; phase is redrawn every subframe.
    pub reflection: Complex64,
    /// Present when the target is also the scatterer serving a downlink user.
    pub dl: Option<DlScatterer>,
}

impl TargetState {
    /// Target at `doa` radians and `range` meters with the given reflection
    /// coefficient; the two-way delay is derived from the range.
    pub fn new(doa: f64, range: f64, reflection: Complex64) -> Self {
        TargetState { doa, range, delay: 2.0 * range / SPEED_OF_LIGHT, reflection, dl: None }
    }

    /// Attach a downlink-scatterer role.
    pub fn with_dl(mut self, user_index: usize, user_doa: f64, gain: Complex64) -> Self {
        self.dl = Some(DlScatterer { user_index, user_doa, gain });
        self
    }

    pub fn is_dl_scatterer(&self) -> bool {
        self.dl.is_some()
    }
}

/// Near-field self-interference channel between the co-located arrays.
#[derive(Debug, Clone)]
pub struct SiChannel {
    /// `M x N` channel matrix, normalized so its squared Frobenius norm
    /// equals `M * N`.
    pub matrix: CMatrix,
    /// Boresight separation between the parallel TX and RX arrays, meters.
    pub tx_rx_separation: f64,
}

/// Spherical-wave self-interference channel of two parallel ULAs separated
/// by `separation` meters perpendicular to the array axis. Entry `(m, n)`
/// is `rho / r_mn * exp(-j 2 pi r_mn / lambda)` with
/// `r_mn = sqrt(separation^2 + (x_m - x_n)^2)`; the scalar `rho` normalizes
/// the squared Frobenius norm to exactly `M * N`.
pub fn build_si_channel(
    tx: &ArrayGeometry,
    rx: &ArrayGeometry,
    separation: f64,
) -> Result<SiChannel> {
    if separation <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "TX/RX separation must be positive, got {separation}"
        )));
    }
    if tx.n_elements == 0 || rx.n_elements == 0 {
        return Err(Error::InvalidInput("SI channel needs non-empty arrays".into()));
    }
    if (tx.wavelength - rx.wavelength).abs() > 1e-12 * tx.wavelength {
        return Err(Error::InvalidInput("TX and RX arrays disagree on wavelength".into()));
    }
    let (m, n) = (rx.n_elements, tx.n_elements);
    let mut ranges = Vec::with_capacity(m * n);
    let mut inv_r2_sum = 0.0;
    for j in 0..n {
        for i in 0..m {
            let dx = rx.element_position(i) - tx.element_position(j);
            let r = (separation * separation + dx * dx).sqrt();
            inv_r2_sum += 1.0 / (r * r);
            ranges.push(r);
        }
    }
    let rho = ((m * n) as f64 / inv_r2_sum).sqrt();
    let wavelength = tx.wavelength;
    let mut k = 0;
    let matrix = CMatrix::from_fn(m, n, |_, _| {
        // from_fn fills column-major, matching the range vector above.
        let r = ranges[k];
        k += 1;
        Complex64::from_polar(rho / r, -TAU * r / wavelength)
    });
    Ok(SiChannel { matrix, tx_rx_separation: separation })
}

/// Radar two-way channel at subcarrier `p`: the superposition over targets of
/// `reflection * exp(-j 2 pi delay * p * delta_f) * a_rx(doa) * a_tx(doa)^H`.
/// With no targets this is the zero matrix.
pub fn radar_response(
    targets: &[TargetState],
    p: usize,
    delta_f: f64,
    tx: &ArrayGeometry,
    rx: &ArrayGeometry,
) -> CMatrix {
    let mut h = CMatrix::zeros(rx.n_elements, tx.n_elements);
    for t in targets {
        let a_rx = steering_vector(rx, t.doa);
        let a_tx = steering_vector(tx, t.doa);
        let gain = t.reflection * Complex64::from_polar(1.0, -TAU * t.delay * p as f64 * delta_f);
        // h += gain * a_rx * a_tx^H
        for col in 0..tx.n_elements {
            let scale = gain * a_tx[col].conj();
            h.column_mut(col).axpy(scale, &a_rx, Complex64::new(1.0, 0.0));
        }
    }
    h
}

/// Rank-1 downlink channel of a served user.
#[derive(Debug, Clone)]
pub struct DlChannel {
    /// `L x N` channel matrix `gain * a_user(user_doa) * a_tx(doa)^H`.
    pub matrix: CMatrix,
    /// Pathloss implied by the gain magnitude, `-20 log10 |gain|`, in dB.
    pub pathloss_db: f64,
}

/// Build the downlink channel of the user served through `target`, which
/// must carry a [`DlScatterer`] role.
pub fn build_dl_channel(
    target: &TargetState,
    user_geom: &ArrayGeometry,
    bs_tx_geom: &ArrayGeometry,
) -> Result<DlChannel> {
    let dl = target.dl.as_ref().ok_or_else(|| {
        Error::InvalidInput("target carries no downlink-scatterer role".into())
    })?;
    let a_user = steering_vector(user_geom, dl.user_doa);
    let a_tx = steering_vector(bs_tx_geom, target.doa);
    let mut matrix = CMatrix::zeros(user_geom.n_elements, bs_tx_geom.n_elements);
    for col in 0..bs_tx_geom.n_elements {
        let scale = dl.gain * a_tx[col].conj();
        matrix.column_mut(col).axpy(scale, &a_user, Complex64::new(0.0, 0.0));
    }
    Ok(DlChannel { matrix, pathloss_db: -20.0 * dl.gain.norm().log10() })
}

/// Advance targets by one subframe of duration `subframe_duration` seconds
/// for tangential motion at `velocity` m/s: each DoA advances by
/// `atan(velocity * subframe_duration / range)`, ranges and delays stay
/// fixed, and the phases of every reflection coefficient and downlink gain
/// are redrawn uniformly (magnitudes preserved).
pub fn evolve_targets(
    targets: &[TargetState],
    velocity: f64,
    subframe_duration: f64,
    rng: &mut impl Rng,
) -> Vec<TargetState> {
    targets
        .iter()
        .map(|t| {
            let step = (velocity * subframe_duration / t.range).atan();
            advance_one(t, step, rng)
        })
        .collect()
}

/// Same evolution with a fixed per-subframe DoA increment of `step` radians
/// for every target (used by resolution sweeps; equivalent to per-target
/// velocities `tan(step) * range / subframe_duration`).
pub fn evolve_targets_fixed_step(
    targets: &[TargetState],
    step: f64,
    rng: &mut impl Rng,
) -> Vec<TargetState> {
    targets.iter().map(|t| advance_one(t, step, rng)).collect()
}

fn advance_one(t: &TargetState, step: f64, rng: &mut impl Rng) -> TargetState {
    let mut next = t.clone();
    next.doa += step;
    next.reflection = Complex64::from_polar(t.reflection.norm(), rng.gen::<f64>() * TAU);
    if let Some(dl) = next.dl.as_mut() {
        dl.gain = Complex64::from_polar(dl.gain.norm(), rng.gen::<f64>() * TAU);
    }
    next
}
