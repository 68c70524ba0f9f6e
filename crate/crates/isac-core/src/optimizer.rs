//! Per-subframe joint beamformer and canceller design.
//!
//! Given the previous subframe's DoA estimates (the radar prior), an estimate
//! of the self-interference channel, and per-user downlink channel estimates,
//! the optimizer
//!
//! 1. builds the composite radar prior matrix,
//! 2. selects per-chain TX analog beams maximizing radar illumination,
//! 3. selects per-chain RX analog beams maximizing a radar-to-SI ratio,
//! 4. designs the tap-limited analog canceller on the effective SI channel,
//! 5. takes the right-singular basis of the analog residual and walks a
//!    shrinking subspace `alpha = N_RF, ..., max(2, U*L)` of its weakest
//!    directions, building a block-diagonalized multi-user precoder inside
//!    each candidate subspace until the RX saturation constraint holds on
//!    every chain,
//! 6. closes the loop with the digital canceller.
//!
//! A candidate's transmit power is rescaled to meet the budget with equality
//! before the saturation check, so the reported set always satisfies
//! `||V_RF V_BB||_F^2 = P_b` on success. If even the smallest subspace
//! violates saturation, a [`SaturationFailure`] outcome is returned (not an
//! error: callers fall back and may retry with a larger tap budget).

use num_complex::Complex64;

use crate::array::{
    assemble_analog, steering_vector, AnalogBeamformer, ArrayGeometry, BeamCodebook,
};
use crate::canceller::{design_analog_canceller, design_digital_canceller, CancellerPair};
use crate::linalg;
use crate::waveform::check_saturation;
use crate::{CMatrix, CVector, Error, Result};

/// Radar-side prior knowledge: tracked DoAs, their composite two-way
/// response `sum_k a_M(doa_k) a_N(doa_k)^H`, and the per-target steering
/// vectors the analog selections assign chains to.
#[derive(Debug, Clone)]
pub struct RadarPrior {
    /// Tracked directions in radians.
    pub doas: Vec<f64>,
    /// Composite `M x N` prior response matrix.
    pub composite: CMatrix,
    /// Per-target TX steering `a_N(doa_k)`.
    pub a_tx: Vec<CVector>,
    /// Per-target RX steering `a_M(doa_k)`.
    pub a_rx: Vec<CVector>,
}

impl RadarPrior {
    pub fn new(doas: Vec<f64>, tx_geom: &ArrayGeometry, rx_geom: &ArrayGeometry) -> Self {
        let mut composite = CMatrix::zeros(rx_geom.n_elements, tx_geom.n_elements);
        let mut a_tx = Vec::with_capacity(doas.len());
        let mut a_rx = Vec::with_capacity(doas.len());
        for &theta in &doas {
            let rx = steering_vector(rx_geom, theta);
            let tx = steering_vector(tx_geom, theta);
            for col in 0..tx_geom.n_elements {
                composite.column_mut(col).axpy(tx[col].conj(), &rx, Complex64::new(1.0, 0.0));
            }
            a_tx.push(tx);
            a_rx.push(rx);
        }
        RadarPrior { doas, composite, a_tx, a_rx }
    }

    /// Target index chain `chain` is assigned to: chains cover the tracked
    /// targets round-robin so every prior direction keeps a dedicated
    /// subarray on each side of the array.
    pub fn assigned_target(&self, chain: usize) -> Option<usize> {
        if self.doas.is_empty() {
            None
        } else {
            Some(chain % self.doas.len())
        }
    }
}

/// Complete beamformer/canceller state for one subframe.
#[derive(Debug, Clone)]
pub struct BeamformerSet {
    pub v_rf: AnalogBeamformer,
    pub w_rf: AnalogBeamformer,
    /// `N_RF x U*L` digital precoder.
    pub v_bb: CMatrix,
    pub cancellers: CancellerPair,
    /// Effective SI channel estimate `W_RF^H H_SI V_RF` the cancellers were
    /// designed against.
    pub h_si_eff: CMatrix,
    /// Subspace dimension `alpha` the precoder was accepted at.
    pub effective_streams: usize,
}

/// Outcome when no candidate subspace met the RX saturation constraint.
#[derive(Debug, Clone)]
pub struct SaturationFailure {
    pub v_rf: AnalogBeamformer,
    pub w_rf: AnalogBeamformer,
    pub analog_canceller: CMatrix,
    pub h_si_eff: CMatrix,
    /// The rejected precoder of the smallest subspace tried.
    pub last_v_bb: CMatrix,
    /// Subspace dimension of `last_v_bb`.
    pub effective_streams: usize,
    /// RX chain with the largest analog-stage residual row power.
    pub worst_chain: usize,
    /// That row power in mW.
    pub worst_row_power_mw: f64,
    pub message: String,
}

/// Result of the per-subframe optimization.
#[derive(Debug, Clone)]
pub enum OptimizeOutcome {
    Accepted(BeamformerSet),
    Saturated(SaturationFailure),
}

/// One candidate of the subspace-shrink loop, for tracing/verification.
#[derive(Debug, Clone)]
pub struct AlphaCandidate {
    pub alpha: usize,
    /// Power-rescaled precoder candidate.
    pub v_bb: CMatrix,
    /// Per-RX-chain saturation flags for this candidate.
    pub saturation: Vec<bool>,
}

/// Intermediate quantities of [`optimize_subframe`], exposed so tests and
/// diagnostics can audit every step.
#[derive(Debug, Clone)]
pub struct OptimizeTrace {
    pub v_rf: CMatrix,
    pub w_rf: CMatrix,
    pub analog_canceller: CMatrix,
    /// Right-singular basis of the analog residual, descending order.
    pub basis: CMatrix,
    pub candidates: Vec<AlphaCandidate>,
}

/// Per-chain TX analog beam selection: chain `n` serves the prior target
/// `n mod K` and picks the codebook beam maximizing the response of its own
/// subarray (columns `n*N_A .. (n+1)*N_A`) toward that target,
/// `||a_M(theta_k) a_N(theta_k)^H_block * v||^2` (ties toward the lowest
/// codebook index). With a single prior target every chain maximizes the
/// full composite response; spreading chains across targets keeps every
/// tracked direction illuminated — a winner-take-all argmax over the summed
/// response would park all subarrays on the strongest cluster, starving the
/// other targets of both probing power and downlink gain.
pub fn select_tx_analog(prior: &RadarPrior, codebook: &BeamCodebook) -> Result<AnalogBeamformer> {
    let n = prior.composite.ncols();
    let n_sub = codebook.beam_len();
    if n_sub == 0 || n % n_sub != 0 {
        return Err(Error::InvalidInput(format!(
            "codebook beam length {n_sub} does not tile the {n} TX elements"
        )));
    }
    let n_chains = n / n_sub;
    let beams = codebook.beams_matrix();
    let mut picks = Vec::with_capacity(n_chains);
    for chain in 0..n_chains {
        let mut best = (0usize, f64::NEG_INFINITY);
        if let Some(target) = prior.assigned_target(chain) {
            // ||a_M a_N^H_block v||^2 = ||a_M||^2 |slice^H v|^2 with unit
            // steering norm, so the per-beam score is |slice^H v|^2.
            let slice = prior.a_tx[target].rows(chain * n_sub, n_sub);
            for k in 0..codebook.n_beams() {
                let s = slice.dotc(&beams.column(k)).norm_sqr();
                if s > best.1 {
                    best = (k, s);
                }
            }
        }
        picks.push(codebook.beams[best.0].clone());
    }
    assemble_analog(picks)
}

/// Per-chain RX analog beam selection: chain `m` listens on the subarray
/// whose rows are `m*M_A .. (m+1)*M_A`, serves the prior target `m mod K`,
/// and picks the beam maximizing the regularized radar-to-SI ratio
/// `||w^H R_k_block||^2 / (||w^H S_block||^2 + mean + eps)` with
/// `R_k = a_M(theta_k) a_N(theta_k)^H * V_RF`, `S = H_si_est * V_RF`,
/// `mean` the chain's SI pickup averaged over the codebook, and
/// `eps = 1e-12 * ||S||_F^2`. When the SI term vanishes entirely the ratio
/// degenerates and the selection falls back to the numerator alone.
///
/// The mean term keeps the two objectives on a common scale: the per-beam
/// SI pickup swings over orders of magnitude between adjacent beams, so a
/// bare ratio trades away most of the listening gain toward the target to
/// sit in an SI null. Saturation is enforced downstream by the cancellers
/// and the transmit subspace, so the selection only needs to prefer the
/// quieter of comparably strong beams, not to flee the mainlobe.
///
/// Spreading chains across targets (matching the TX side) keeps the
/// combined RX response toward every tracked direction strong, and it keeps
/// the per-chain beams distinct: if subarrays shared one beam, the combined
/// steering response would factor into a common subarray pattern times a
/// pure inter-subarray phase ramp, which repeats every `2 / M_A` in
/// sin(theta) and hands the subspace estimator exact aliases. For the same
/// reason a multi-target prior never reuses a beam across chains — no two
/// subarrays may share a pattern. A single-direction prior keeps the
/// classic behavior — every chain on the beam steered at the target —
/// since a one-dimensional signal space leaves nothing for de-duplication
/// to disambiguate.
pub fn select_rx_analog(
    prior: &RadarPrior,
    h_si_est: &CMatrix,
    v_rf: &AnalogBeamformer,
    codebook: &BeamCodebook,
) -> Result<AnalogBeamformer> {
    let m = prior.composite.nrows();
    let m_sub = codebook.beam_len();
    if m_sub == 0 || m % m_sub != 0 {
        return Err(Error::InvalidInput(format!(
            "codebook beam length {m_sub} does not tile the {m} RX elements"
        )));
    }
    if h_si_est.nrows() != m || h_si_est.ncols() != v_rf.n_elements() {
        return Err(Error::InvalidInput("SI estimate shape disagrees with arrays".into()));
    }
    let m_chains = m / m_sub;
    // Per-target numerator matrices a_M(theta_k) * (a_N(theta_k)^H V_RF).
    let radar_per_target: Vec<CMatrix> = (0..prior.doas.len())
        .map(|k| {
            let row = prior.a_tx[k].adjoint() * &v_rf.assembled;
            &prior.a_rx[k] * row
        })
        .collect();
    let si = linalg::mul(h_si_est, &v_rf.assembled);
    let eps = 1e-12 * si.norm_squared();
    let beams = codebook.beams_matrix();
    let dedup = prior.doas.len() >= 2;
    let mut used: Vec<usize> = Vec::new();
    let mut picks = Vec::with_capacity(m_chains);
    for chain in 0..m_chains {
        let si_block = si.rows(chain * m_sub, m_sub).into_owned();
        // Row j of these is w_j^H applied to the block.
        let si_rows = linalg::adjoint_mul(&beams, &si_block);
        let mut best = (0usize, f64::NEG_INFINITY);
        if let Some(target) = prior.assigned_target(chain) {
            let radar_block = radar_per_target[target].rows(chain * m_sub, m_sub).into_owned();
            let radar_rows = linalg::adjoint_mul(&beams, &radar_block);
            let mean_den = si_rows.norm_squared() / codebook.n_beams() as f64;
            let mut found = false;
            for k in 0..codebook.n_beams() {
                if dedup && used.contains(&k) {
                    continue;
                }
                let num = radar_rows.row(k).norm_squared();
                let den = si_rows.row(k).norm_squared() + mean_den + eps;
                let score = if den > 0.0 { num / den } else { num };
                if !found || score > best.1 {
                    best = (k, score);
                    found = true;
                }
            }
            used.push(best.0);
        } else {
            // No prior targets: nothing to listen for, minimize SI pickup.
            for k in 0..codebook.n_beams() {
                let score = -(si_rows.row(k).norm_squared());
                if score > best.1 {
                    best = (k, score);
                }
            }
        }
        picks.push(codebook.beams[best.0].clone());
    }
    assemble_analog(picks)
}

/// Block-diagonalized multi-user precoder inside an `alpha`-dimensional
/// effective space.
#[derive(Debug, Clone)]
pub struct BdPrecoder {
    /// Per-user `alpha x L` precoders.
    pub per_user: Vec<CMatrix>,
    /// All users stacked column-wise, `alpha x U*L`.
    pub stacked: CMatrix,
}

/// Block diagonalization over per-user effective channels (`L x alpha`
/// each): user `u` transmits in the null space of all other users' rows,
/// along the strongest directions of its own channel there, with power
/// `P_b / U` per user before the caller's final rescale.
///
/// Fails with a rank-deficiency error when the null space cannot hold `L`
/// streams, i.e. when `alpha < U*L`.
pub fn bd_precoder(h_eff: &[CMatrix], p_b: f64) -> Result<BdPrecoder> {
    let n_users = h_eff.len();
    if n_users == 0 {
        return Err(Error::InvalidInput("block diagonalization needs at least one user".into()));
    }
    let l = h_eff[0].nrows();
    let alpha = h_eff[0].ncols();
    if h_eff.iter().any(|h| h.nrows() != l || h.ncols() != alpha) {
        return Err(Error::InvalidInput("per-user effective channels disagree in shape".into()));
    }
    if p_b <= 0.0 {
        return Err(Error::InvalidInput(format!("power budget must be positive, got {p_b}")));
    }
    let others_rows = (n_users - 1) * l;
    if alpha < others_rows + l {
        return Err(Error::RankDeficient(format!(
            "null space holds {} dimensions but each user needs {l} (alpha = {alpha}, U = {n_users})",
            alpha.saturating_sub(others_rows)
        )));
    }
    let null_dim = alpha - others_rows;
    let scale = Complex64::new((p_b / n_users as f64).sqrt(), 0.0);
    let mut per_user = Vec::with_capacity(n_users);
    let mut stacked = CMatrix::zeros(alpha, n_users * l);
    for u in 0..n_users {
        let mut rows = CMatrix::zeros(others_rows, alpha);
        let mut at = 0;
        for (v, h) in h_eff.iter().enumerate() {
            if v != u {
                rows.rows_mut(at, l).copy_from(h);
                at += l;
            }
        }
        let null_basis = linalg::null_space_basis(&rows, null_dim);
        let projected = linalg::mul(&h_eff[u], &null_basis);
        let (_, v_basis) = linalg::right_singular_basis(&projected);
        let top = v_basis.columns(0, l).into_owned();
        let g_u = linalg::mul(&null_basis, &top) * scale;
        stacked.view_mut((0, u * l), (alpha, l)).copy_from(&g_u);
        per_user.push(g_u);
    }
    Ok(BdPrecoder { per_user, stacked })
}

/// Full per-subframe optimization; see the module docs for the step list.
/// `h_dl_est` holds one `L x N` estimated channel per user.
pub fn optimize_subframe(
    h_si_est: &CMatrix,
    h_dl_est: &[CMatrix],
    prior: &RadarPrior,
    tx_codebook: &BeamCodebook,
    rx_codebook: &BeamCodebook,
    n_taps: usize,
    p_b: f64,
    rho_b: f64,
) -> Result<OptimizeOutcome> {
    optimize_subframe_traced(h_si_est, h_dl_est, prior, tx_codebook, rx_codebook, n_taps, p_b, rho_b)
        .map(|(outcome, _)| outcome)
}

/// [`optimize_subframe`] plus the full per-step trace.
pub fn optimize_subframe_traced(
    h_si_est: &CMatrix,
    h_dl_est: &[CMatrix],
    prior: &RadarPrior,
    tx_codebook: &BeamCodebook,
    rx_codebook: &BeamCodebook,
    n_taps: usize,
    p_b: f64,
    rho_b: f64,
) -> Result<(OptimizeOutcome, OptimizeTrace)> {
    if prior.doas.is_empty() {
        return Err(Error::InvalidInput("optimizer needs at least one tracked target".into()));
    }
    let n_users = h_dl_est.len();
    if n_users == 0 {
        return Err(Error::InvalidInput("optimizer needs at least one user channel".into()));
    }
    let l = h_dl_est[0].nrows();
    let total_streams = n_users * l;

    let v_rf = select_tx_analog(prior, tx_codebook)?;
    let w_rf = select_rx_analog(prior, h_si_est, &v_rf, rx_codebook)?;
    let n_rf = v_rf.n_chains();
    if n_rf < total_streams {
        return Err(Error::InvalidInput(format!(
            "{total_streams} streams cannot fit in {n_rf} RF chains"
        )));
    }
    if h_dl_est.iter().any(|h| h.nrows() != l || h.ncols() != v_rf.n_elements()) {
        return Err(Error::InvalidInput("per-user DL estimates disagree in shape".into()));
    }

    // Effective SI channel between chains, analog canceller, residual basis.
    let h_si_eff = linalg::adjoint_mul(&w_rf.assembled, &linalg::mul(h_si_est, &v_rf.assembled));
    let analog = design_analog_canceller(&h_si_eff, n_taps)?;
    let residual = &h_si_eff + &analog;
    let (_, basis) = linalg::right_singular_basis(&residual);

    // Per-user channels after the analog precoder, reused across candidates.
    let dl_through_rf: Vec<CMatrix> =
        h_dl_est.iter().map(|h| linalg::mul(h, &v_rf.assembled)).collect();

    let mut trace = OptimizeTrace {
        v_rf: v_rf.assembled.clone(),
        w_rf: w_rf.assembled.clone(),
        analog_canceller: analog.clone(),
        basis: basis.clone(),
        candidates: Vec::new(),
    };

    let alpha_floor = total_streams.max(2).min(n_rf);
    let mut rejected: Option<(usize, CMatrix, Vec<f64>)> = None;
    for alpha in (alpha_floor..=n_rf).rev() {
        // Weakest-residual directions: the last `alpha` singular vectors.
        let f = basis.columns(n_rf - alpha, alpha).into_owned();
        let h_eff: Vec<CMatrix> = dl_through_rf.iter().map(|h| linalg::mul(h, &f)).collect();
        let bd = bd_precoder(&h_eff, p_b)?;
        let mut v_bb = linalg::mul(&f, &bd.stacked);
        // Meet the TX power budget with equality (the BD scaling alone does
        // not account for the stream count), then test saturation.
        let radiated = linalg::mul(&v_rf.assembled, &v_bb).norm_squared();
        if radiated > 0.0 {
            v_bb *= Complex64::new((p_b / radiated).sqrt(), 0.0);
        }
        let flags = check_saturation(&residual, &v_bb, rho_b);
        trace.candidates.push(AlphaCandidate {
            alpha,
            v_bb: v_bb.clone(),
            saturation: flags.clone(),
        });
        if flags.iter().all(|&ok| ok) {
            let digital = design_digital_canceller(&h_si_eff, &analog);
            let set = BeamformerSet {
                v_rf,
                w_rf,
                v_bb,
                cancellers: CancellerPair { analog, digital, n_taps },
                h_si_eff,
                effective_streams: alpha,
            };
            return Ok((OptimizeOutcome::Accepted(set), trace));
        }
        let row_powers = linalg::row_powers(&linalg::mul(&residual, &v_bb));
        rejected = Some((alpha, v_bb, row_powers));
    }

    let (alpha, last_v_bb, row_powers) =
        rejected.expect("subspace loop runs at least once");
    let (worst_chain, worst_power) = row_powers
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("row power comparison"))
        .map(|(i, &p)| (i, p))
        .expect("at least one RX chain");
    let message = format!(
        "analog canceller with {n_taps} taps does not meet the residual SI constraint: \
         RX chain {worst_chain} carries {worst_power:.3e} mW > {rho_b:.3e} mW at alpha = {alpha}"
    );
    let failure = SaturationFailure {
        v_rf,
        w_rf,
        analog_canceller: analog,
        h_si_eff,
        last_v_bb,
        effective_streams: alpha,
        worst_chain,
        worst_row_power_mw: worst_power,
        message,
    };
    Ok((OptimizeOutcome::Saturated(failure), trace))
}

/// Radar SNR of a beamformer set against the prior's composite response:
/// `||W^H H_R V_RF V_BB||_F^2 / (||(H_eff + C + D) V_BB||_F^2 + ||W||_F^2 sigma_b^2)`.
pub fn radar_snr(prior: &RadarPrior, set: &BeamformerSet, sigma_b2: f64) -> f64 {
    let through = linalg::mul(&prior.composite, &linalg::mul(&set.v_rf.assembled, &set.v_bb));
    let num = linalg::adjoint_mul(&set.w_rf.assembled, &through).norm_squared();
    let residual =
        linalg::mul(&(&set.h_si_eff + &set.cancellers.analog + &set.cancellers.digital), &set.v_bb)
            .norm_squared();
    num / (residual + set.w_rf.assembled.norm_squared() * sigma_b2)
}

/// Sum over users of the downlink SNR `||H_DL,u V_RF V_BB||_F^2 / sigma_u^2`.
pub fn dl_snr_sum(h_dl: &[CMatrix], set: &BeamformerSet, sigma_u2: f64) -> f64 {
    let precoder = linalg::mul(&set.v_rf.assembled, &set.v_bb);
    h_dl.iter().map(|h| linalg::mul(h, &precoder).norm_squared() / sigma_u2).sum()
}
