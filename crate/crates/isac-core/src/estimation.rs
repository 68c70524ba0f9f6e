//! Radar parameter estimation from the combined baseband grid.
//!
//! Covariance-based MUSIC scans a dense angular grid for target directions,
//! and a quotient-based likelihood scan over the subcarrier dimension picks
//! each target's delay bin:
//!
//! * [`sample_covariance`] averages outer products of the per-chain baseband
//!   snapshots over every resource element.
//! * [`music_doa`] eigendecomposes that covariance, projects grid steering
//!   vectors through the analog combiner onto the noise subspace, and picks
//!   the strongest separated peaks of the resulting pseudo-spectrum.
//! * [`range_estimate`] divides the reconstructed antenna-level receive grid
//!   by a steered reference of the transmitted grid, so a target's residual
//!   phase ramp across subcarriers becomes a pure tone whose discrete
//!   frequency is the delay bin.
//! * [`associate_and_score`] matches estimates to ground truth with a
//!   minimum-total-error assignment for error/RMSE bookkeeping.

use std::f64::consts::TAU;

use num_complex::Complex64;

use crate::array::{steering_vector, AnalogBeamformer, ArrayGeometry};
use crate::channel::{TargetState, SPEED_OF_LIGHT};
use crate::linalg;
use crate::waveform::{adjoint_apply_to_grid, GridStage, SubframeGrid};
use crate::{CMatrix, CVector, Error, Result};

/// Sample covariance of the combined baseband grid.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    /// Hermitian `M_RF x M_RF` covariance.
    pub matrix: CMatrix,
    /// Number of resource elements averaged.
    pub n_snapshots: usize,
}

/// Average of the per-resource-element outer products `y y^H`. The result is
/// re-hermitized so the Hermitian invariant holds to rounding error, which
/// leaves positive semidefiniteness intact.
pub fn sample_covariance(bb_grid: &SubframeGrid) -> Result<CovarianceEstimate> {
    if bb_grid.stage != GridStage::RxChain {
        return Err(Error::InvalidInput(format!(
            "sample covariance expects an RX-chain grid, got {:?}",
            bb_grid.stage
        )));
    }
    let n = bb_grid.n_resource_elements();
    let yh = bb_grid.data.adjoint();
    let mut r = linalg::mul(&bb_grid.data, &yh);
    let radj = r.adjoint();
    r += radj;
    r *= Complex64::new(0.5 / n as f64, 0.0);
    Ok(CovarianceEstimate { matrix: r, n_snapshots: n })
}

/// The MUSIC pseudo-spectrum over the angular search grid.
#[derive(Debug, Clone)]
pub struct MusicSpectrum {
    /// Grid angles in radians, strictly increasing.
    pub thetas: Vec<f64>,
    /// Pseudo-power at each grid angle (always positive).
    pub pseudo_power: Vec<f64>,
    /// Noise subspace dimension `M_RF - K`.
    pub noise_subspace_dim: usize,
}

/// DoA estimates plus the spectrum they were read from.
#[derive(Debug, Clone)]
pub struct DoaEstimate {
    /// Estimated directions in radians, ascending.
    pub doas: Vec<f64>,
    pub spectrum: MusicSpectrum,
    /// Set when the spectrum carried fewer than `K` separated peaks (the
    /// output was padded with the strongest remaining grid points) or when
    /// the covariance eigenvalues are too uniform to define a signal
    /// subspace at all.
    pub degenerate: bool,
}

/// MUSIC DoA estimation through the analog combiner.
///
/// Eigenvalues of `cov` are sorted descending; the eigenvectors of the
/// `M_RF - k` smallest span the noise subspace `U_n`, and the spectrum is
/// `1 / || U_n^H W_RF^H a_M(theta) ||^2` on a grid of spacing `grid_step`
/// (radians) covering `sector`. Candidate directions are the strict local
/// maxima of that spectrum; the `k` returned are those with the largest
/// view-normalized height `||W_RF^H a||^2 / ||U_n^H W_RF^H a||^2`, kept at
/// least `2 * grid_step` apart. The normalization matters because the raw
/// pseudo-power also diverges wherever the combiner is blind — at angles
/// where every selected beam pattern is near a null, `||W_RF^H a||` itself
/// vanishes and drags the denominator down with no signal present. Weighting
/// by the front-end gain cancels that artifact while leaving genuine
/// subspace nulls (which shrink the denominator *relative to* the gain)
/// towering above it. If the spectrum has fewer such peaks than `k`, the
/// highest remaining grid points fill in and the result is flagged
/// degenerate.
pub fn music_doa(
    cov: &CovarianceEstimate,
    k: usize,
    w_rf: &AnalogBeamformer,
    grid_step: f64,
    sector: (f64, f64),
    rx_geom: &ArrayGeometry,
) -> Result<DoaEstimate> {
    let m_rf = w_rf.n_chains();
    if k == 0 {
        return Err(Error::InvalidInput("MUSIC needs at least one target".into()));
    }
    if k >= m_rf {
        return Err(Error::InvalidInput(format!(
            "noise subspace is empty: {k} targets with only {m_rf} RX chains"
        )));
    }
    if cov.matrix.nrows() != m_rf || cov.matrix.ncols() != m_rf {
        return Err(Error::InvalidInput(format!(
            "covariance is {}x{} but the combiner has {m_rf} chains",
            cov.matrix.nrows(),
            cov.matrix.ncols()
        )));
    }
    if w_rf.n_elements() != rx_geom.n_elements {
        return Err(Error::InvalidInput("combiner and RX geometry disagree".into()));
    }
    if !(grid_step > 0.0) || !grid_step.is_finite() {
        return Err(Error::InvalidInput(format!("grid step must be positive, got {grid_step}")));
    }
    if !(sector.0 < sector.1) {
        return Err(Error::InvalidInput(format!(
            "sector [{}, {}] is empty",
            sector.0, sector.1
        )));
    }

    let (evals, evecs) = linalg::hermitian_eigen_desc(&cov.matrix);
    let noise_dim = m_rf - k;
    let u_n = evecs.columns(k, noise_dim).into_owned();
    // Eigenvalue spread: a near-isotropic covariance has no signal subspace.
    let lambda_max = evals[0];
    let lambda_min = evals[m_rf - 1];
    let mut degenerate = lambda_max <= 0.0 || (lambda_max - lambda_min) / lambda_max <= 1e-9;

    // W_RF U combined once, split into signal and noise halves: the spectrum
    // denominator at angle theta is ||(W_RF U_n)^H a(theta)||^2 and the
    // front-end gain ||W_RF^H a||^2 is the sum over both halves (U unitary).
    let wu = linalg::mul(&w_rf.assembled, &u_n);
    let ws = linalg::mul(&w_rf.assembled, &evecs.columns(0, k).into_owned());
    let m = rx_geom.n_elements;
    let n_steps = ((sector.1 - sector.0) / grid_step + 1e-9).floor() as usize;
    let n_points = n_steps + 1;
    if n_points < k {
        return Err(Error::InvalidInput(format!(
            "search grid has only {n_points} points for {k} targets"
        )));
    }
    let mut thetas = Vec::with_capacity(n_points);
    let mut pseudo_power = Vec::with_capacity(n_points);
    let mut height = Vec::with_capacity(n_points);
    let scale = 1.0 / (m as f64).sqrt();
    let wu_cols = wu.as_slice();
    let ws_cols = ws.as_slice();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for i in 0..n_points {
        let theta = sector.0 + i as f64 * grid_step;
        // Steering vector by phase recurrence: one sincos per grid point
        // instead of one per element (drift over M multiplies ~ M*eps).
        let step =
            Complex64::from_polar(1.0, -TAU / rx_geom.wavelength * rx_geom.element_spacing * theta.sin());
        let mut cur = Complex64::new(scale, 0.0);
        for entry in a.iter_mut() {
            *entry = cur;
            cur *= step;
        }
        let mut den = 0.0;
        for j in 0..noise_dim {
            let col = &wu_cols[j * m..(j + 1) * m];
            let mut acc = Complex64::new(0.0, 0.0);
            for (w_entry, a_entry) in col.iter().zip(a.iter()) {
                acc += w_entry.conj() * a_entry;
            }
            den += acc.norm_sqr();
        }
        let mut sig = 0.0;
        for j in 0..k {
            let col = &ws_cols[j * m..(j + 1) * m];
            let mut acc = Complex64::new(0.0, 0.0);
            for (w_entry, a_entry) in col.iter().zip(a.iter()) {
                acc += w_entry.conj() * a_entry;
            }
            sig += acc.norm_sqr();
        }
        thetas.push(theta);
        pseudo_power.push(1.0 / den.max(f64::MIN_POSITIVE));
        height.push((sig + den) / den.max(f64::MIN_POSITIVE));
    }

    // Strict interior local maxima of the pseudo-spectrum, ranked by
    // view-normalized height (ties toward lower angle), thinned to the
    // minimum separation.
    let power = &pseudo_power;
    let mut peaks: Vec<usize> = (1..n_points.saturating_sub(1))
        .filter(|&i| power[i] > power[i - 1] && power[i] > power[i + 1])
        .collect();
    peaks
        .sort_by(|&a, &b| height[b].partial_cmp(&height[a]).expect("finite height").then(a.cmp(&b)));
    let min_sep = 2.0 * grid_step * (1.0 - 1e-9);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for &i in &peaks {
        if chosen.len() == k {
            break;
        }
        if chosen.iter().all(|&j| (thetas[i] - thetas[j]).abs() >= min_sep) {
            chosen.push(i);
        }
    }
    if chosen.len() < k {
        // Pad with the highest remaining grid points, still keeping the
        // separation rule as long as candidates allow it.
        degenerate = true;
        let mut rest: Vec<usize> = (0..n_points).filter(|i| !chosen.contains(i)).collect();
        rest.sort_by(|&a, &b| {
            height[b].partial_cmp(&height[a]).expect("finite height").then(a.cmp(&b))
        });
        for &i in &rest {
            if chosen.len() == k {
                break;
            }
            if chosen.iter().all(|&j| (thetas[i] - thetas[j]).abs() >= min_sep) {
                chosen.push(i);
            }
        }
        for &i in &rest {
            if chosen.len() == k {
                break;
            }
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
    }
    let mut doas: Vec<f64> = chosen.iter().map(|&i| thetas[i]).collect();
    doas.sort_by(|a, b| a.partial_cmp(b).expect("finite angle"));

    Ok(DoaEstimate {
        doas,
        spectrum: MusicSpectrum { thetas, pseudo_power, noise_subspace_dim: noise_dim },
        degenerate,
    })
}

/// One target's delay-bin estimate.
#[derive(Debug, Clone, Copy)]
pub struct RangeEstimate {
    /// Winning delay bin `n*` in `0..P`.
    pub bin: usize,
    /// `n* / (P * delta_f)` in seconds.
    pub delay: f64,
    /// Two-way range `delay * c / 2` in meters.
    pub range: f64,
}

/// Quotient-based delay estimation toward the direction `theta_hat`.
///
/// Per resource element the antenna-level reconstruction `W_RF * y_bb` is
/// divided entrywise by the reference `g = a_M(theta_hat) a_N(theta_hat)^H x`
/// and averaged over antennas. Because every entry of `a_M` has the same
/// modulus, that average collapses algebraically to
/// `(a_M^H W_RF y_bb) / (a_N^H x)`, and an entry can only fall below the
/// `1e-12 * ||g||` exclusion threshold when the whole reference vanishes —
/// in which case the resource element is skipped. The averaged quotients
/// keep a residual phase ramp `exp(-j 2 pi delta_f tau p)` across
/// subcarriers `p`; correlating against every integer tone
/// `exp(j 2 pi p n / P)` and maximizing picks the delay bin (first bin wins
/// ties).
///
/// `null_thetas` lists other estimated target directions whose returns
/// should not leak into this target's tone: the quotient beamformer is
/// projected onto the orthogonal complement of their chain-space signatures
/// `W_RF^H a_M(theta_j)`. Without this a nearby strong return (range decays
/// as the fourth power) can out-shout the tone of the direction actually
/// being interrogated. Directions within a full-array beamwidth of
/// `theta_hat` are skipped — their signatures are nearly collinear with the
/// target's own, so nulling them would null the target too — and if the
/// projection still collapses the beamformer, it falls back to the plain
/// one. An empty list reproduces the bare quotient.
pub fn range_estimate(
    bb_grid: &SubframeGrid,
    w_rf: &AnalogBeamformer,
    tx_grid: &SubframeGrid,
    theta_hat: f64,
    null_thetas: &[f64],
    delta_f: f64,
    tx_geom: &ArrayGeometry,
    rx_geom: &ArrayGeometry,
) -> Result<RangeEstimate> {
    if bb_grid.stage != GridStage::RxChain {
        return Err(Error::InvalidInput(format!(
            "range estimation expects an RX-chain grid, got {:?}",
            bb_grid.stage
        )));
    }
    if tx_grid.stage != GridStage::TxAntenna {
        return Err(Error::InvalidInput(format!(
            "range estimation expects a TX-antenna reference grid, got {:?}",
            tx_grid.stage
        )));
    }
    if bb_grid.n_subcarriers != tx_grid.n_subcarriers || bb_grid.n_symbols != tx_grid.n_symbols {
        return Err(Error::InvalidInput("baseband and TX grids disagree in shape".into()));
    }
    if bb_grid.width() != w_rf.n_chains() {
        return Err(Error::InvalidInput(format!(
            "grid carries {} chains but the combiner has {}",
            bb_grid.width(),
            w_rf.n_chains()
        )));
    }
    if w_rf.n_elements() != rx_geom.n_elements || tx_grid.width() != tx_geom.n_elements {
        return Err(Error::InvalidInput("grids and array geometries disagree".into()));
    }
    if !(delta_f > 0.0) {
        return Err(Error::InvalidInput(format!(
            "subcarrier spacing must be positive, got {delta_f}"
        )));
    }

    let a_rx = steering_vector(rx_geom, theta_hat);
    let a_tx = steering_vector(tx_geom, theta_hat);
    // u^H y_bb = a_M^H (W_RF y_bb); s = a_N^H x per resource element.
    let mut u = w_rf.assembled.ad_mul(&a_rx);
    // Null the other targets' signatures: u <- (I - Q Q^H) u with Q an
    // orthonormal basis of span{W_RF^H a_M(theta_j)}. Projecting the
    // beamformer equals projecting the data (the projector is Hermitian).
    let beamwidth_sin = 2.0 / rx_geom.n_elements as f64;
    let nulls: Vec<CVector> = null_thetas
        .iter()
        .filter(|&&t| (t.sin() - theta_hat.sin()).abs() >= beamwidth_sin)
        .map(|&t| w_rf.assembled.ad_mul(&steering_vector(rx_geom, t)))
        .collect();
    if !nulls.is_empty() {
        let b = CMatrix::from_columns(&nulls);
        let q = b.qr().q();
        let projected = &u - &q * (q.ad_mul(&u));
        if projected.norm_squared() > 1e-6 * u.norm_squared() {
            u = projected;
        }
    }
    let s = adjoint_apply_to_grid(&a_tx, tx_grid);

    let p = bb_grid.n_subcarriers;
    let q = bb_grid.n_symbols;
    let mut z = vec![Complex64::new(0.0, 0.0); p];
    let mut used = 0usize;
    for sub in 0..p {
        for sym in 0..q {
            let col = bb_grid.col_index(sub, sym);
            let reference = s[col];
            if reference.norm_sqr() == 0.0 {
                continue;
            }
            used += 1;
            let projected = u.dotc(&bb_grid.data.column(col));
            z[sub] += projected / reference;
        }
    }
    if used == 0 {
        return Err(Error::EstimationFailure(
            "reference signal vanished on every resource element".into(),
        ));
    }

    let mut best_bin = 0usize;
    let mut best_mag = f64::NEG_INFINITY;
    for n in 0..p {
        let tone = Complex64::from_polar(1.0, TAU * n as f64 / p as f64);
        let mut cur = Complex64::new(1.0, 0.0);
        let mut acc = Complex64::new(0.0, 0.0);
        for &z_p in &z {
            acc += z_p * cur;
            cur *= tone;
        }
        let mag = acc.norm_sqr();
        if mag > best_mag {
            best_bin = n;
            best_mag = mag;
        }
    }
    let delay = best_bin as f64 / (p as f64 * delta_f);
    Ok(RangeEstimate { bin: best_bin, delay, range: delay * SPEED_OF_LIGHT / 2.0 })
}

/// Estimate-to-truth matching and error metrics.
#[derive(Debug, Clone)]
pub struct ScoreReport {
    /// `assignment[t]` is the estimate index paired with truth target `t`.
    pub assignment: Vec<usize>,
    /// Signed per-target DoA errors (estimate minus truth) in degrees.
    pub doa_errors_deg: Vec<f64>,
    /// Signed per-target range errors in meters.
    pub range_errors_m: Vec<f64>,
    /// Root mean square of `doa_errors_deg`.
    pub doa_rmse_deg: f64,
}

/// Exhaustive assignment of `values` to `reference` slots minimizing the
/// total absolute difference; `result[r]` is the index into `values` paired
/// with `reference[r]`. Both slices must have the same (small) length.
pub(crate) fn min_total_abs_assignment(values: &[f64], reference: &[f64]) -> Vec<usize> {
    let k = reference.len();
    debug_assert_eq!(values.len(), k);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(k);
    let mut used = vec![false; k];
    fn recurse(
        r: usize,
        k: usize,
        cost: f64,
        values: &[f64],
        reference: &[f64],
        used: &mut [bool],
        current: &mut Vec<usize>,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if r == k {
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                *best = Some((cost, current.clone()));
            }
            return;
        }
        for v in 0..k {
            if used[v] {
                continue;
            }
            used[v] = true;
            current.push(v);
            let step = (values[v] - reference[r]).abs();
            recurse(r + 1, k, cost + step, values, reference, used, current, best);
            current.pop();
            used[v] = false;
        }
    }
    recurse(0, k, 0.0, values, reference, &mut used, &mut current, &mut best);
    best.expect("at least one assignment").1
}

/// Matches estimates to truth by exhaustive minimum-total-absolute-DoA-error
/// assignment (practical for the handful of targets tracked here) and
/// reports per-target errors.
pub fn associate_and_score(
    est_doas: &[f64],
    est_ranges: &[f64],
    truth: &[TargetState],
) -> Result<ScoreReport> {
    let k = truth.len();
    if k == 0 {
        return Err(Error::InvalidInput("no targets to score".into()));
    }
    if est_doas.len() != k || est_ranges.len() != k {
        return Err(Error::InvalidInput(format!(
            "estimate counts ({} DoAs, {} ranges) do not match {k} targets",
            est_doas.len(),
            est_ranges.len()
        )));
    }
    if k > 9 {
        return Err(Error::InvalidInput(format!(
            "exhaustive assignment limited to 9 targets, got {k}"
        )));
    }

    let reference: Vec<f64> = truth.iter().map(|t| t.doa).collect();
    let assignment = min_total_abs_assignment(est_doas, &reference);

    let mut doa_errors_deg = Vec::with_capacity(k);
    let mut range_errors_m = Vec::with_capacity(k);
    for t in 0..k {
        let e = assignment[t];
        doa_errors_deg.push((est_doas[e] - truth[t].doa).to_degrees());
        range_errors_m.push(est_ranges[e] - truth[t].range);
    }
    let doa_rmse_deg =
        (doa_errors_deg.iter().map(|e| e * e).sum::<f64>() / k as f64).sqrt();
    Ok(ScoreReport { assignment, doa_errors_deg, range_errors_m, doa_rmse_deg })
}
