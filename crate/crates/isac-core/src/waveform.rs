//! Frequency-domain OFDM subframe grids and the operations that move them
//! along the signal path: QPSK symbol generation, hybrid TX precoding, the
//! radar receive path (reflections + self-interference + noise), baseband
//! combining with cancellers, the downlink user receive path, and the RF
//! saturation check.
//!
//! Everything is per resource element; there is no time-domain synthesis.
//! A grid stores its `width x (P * Q)` samples column-major with resource
//! element `(p, q)` in column `p * Q + q`.
//!
//! Determinism: symbol and noise draws use one ChaCha substream per resource
//! element (stream id = column index), so grids are bit-identical for a given
//! seed regardless of evaluation order.

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::FRAC_1_SQRT_2;

use crate::array::{steering_vector, AnalogBeamformer, ArrayGeometry};
use crate::channel::{DlChannel, SiChannel, TargetState};
use crate::linalg;
use crate::{CMatrix, CVector, Error, Result};

/// Where along the signal path a grid lives; the stage fixes the row width
/// (streams `U*L`, TX antennas `N`, RX antennas `M`, RX chains `M_RF`, or
/// user antennas `L`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridStage {
    Symbols,
    TxAntenna,
    RxAntenna,
    RxChain,
    UserRx,
}

/// Low-rank factorization `data = left * right` carried as a cache by
/// precoded grids; lets the receive paths apply a channel `H` as
/// `(H * left) * right`, which is ~30x cheaper than `H * data` at the
/// default dimensions.
#[derive(Debug, Clone)]
pub(crate) struct LowRank {
    pub left: CMatrix,
    pub right: CMatrix,
}

/// One subframe of frequency-domain samples at some stage of the signal path.
#[derive(Debug, Clone)]
pub struct SubframeGrid {
    /// `width x (P * Q)` samples, resource element `(p, q)` in column
    /// `p * Q + q`.
    pub data: CMatrix,
    /// Number of active subcarriers `P`.
    pub n_subcarriers: usize,
    /// Number of OFDM symbols `Q`.
    pub n_symbols: usize,
    pub stage: GridStage,
    pub(crate) low_rank: Option<LowRank>,
}

impl SubframeGrid {
    /// Wrap existing samples; `data` must have `P * Q` columns.
    pub fn from_data(
        stage: GridStage,
        n_subcarriers: usize,
        n_symbols: usize,
        data: CMatrix,
    ) -> Result<Self> {
        if n_subcarriers == 0 || n_symbols == 0 {
            return Err(Error::InvalidInput("grid needs P, Q > 0".into()));
        }
        if data.ncols() != n_subcarriers * n_symbols {
            return Err(Error::InvalidInput(format!(
                "grid data has {} columns, expected P*Q = {}",
                data.ncols(),
                n_subcarriers * n_symbols
            )));
        }
        Ok(SubframeGrid { data, n_subcarriers, n_symbols, stage, low_rank: None })
    }

    /// Row width of the stored samples.
    pub fn width(&self) -> usize {
        self.data.nrows()
    }

    /// Number of resource elements `P * Q`.
    pub fn n_resource_elements(&self) -> usize {
        self.n_subcarriers * self.n_symbols
    }

    /// Column index of resource element `(p, q)`.
    pub fn col_index(&self, p: usize, q: usize) -> usize {
        debug_assert!(p < self.n_subcarriers && q < self.n_symbols);
        p * self.n_symbols + q
    }

    /// Sample vector at resource element `(p, q)`.
    pub fn re(&self, p: usize, q: usize) -> CVector {
        self.data.column(self.col_index(p, q)).into_owned()
    }

    fn same_shape_as(&self, other: &SubframeGrid) -> bool {
        self.n_subcarriers == other.n_subcarriers && self.n_symbols == other.n_symbols
    }
}

/// Per-resource-element noise variances in mW.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Noise variance at each base-station RX antenna.
    pub variance_bs: f64,
    /// Noise variance at each user antenna.
    pub variance_user: f64,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        NoiseSpec { variance_bs: 0.0, variance_user: 0.0 }
    }
}

/// Draw a subframe of unit-modulus QPSK stream symbols, stacked user-major:
/// rows `u*L .. u*L + L` carry user `u`'s `L` streams.
///
/// Fails when `U * L > n_rf` (more streams than RF chains).
pub fn generate_symbols(
    n_subcarriers: usize,
    n_symbols: usize,
    n_users: usize,
    n_streams: usize,
    n_rf: usize,
    seed: u64,
) -> Result<SubframeGrid> {
    let width = n_users * n_streams;
    if width > n_rf {
        return Err(Error::InvalidInput(format!(
            "U*L = {width} streams exceed {n_rf} RF chains"
        )));
    }
    if n_subcarriers == 0 || n_symbols == 0 || width == 0 {
        return Err(Error::InvalidInput("symbol grid needs P, Q, U, L > 0".into()));
    }
    let n_res = n_subcarriers * n_symbols;
    let base = ChaCha8Rng::seed_from_u64(seed);
    let mut data = CMatrix::zeros(width, n_res);
    for col in 0..n_res {
        let mut rng = base.clone();
        rng.set_stream(col as u64);
        for row in 0..width {
            let bits = rng.next_u32() & 0b11;
            let re = if bits & 0b01 == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
            let im = if bits & 0b10 == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
            data[(row, col)] = Complex64::new(re, im);
        }
    }
    let mut grid = SubframeGrid::from_data(GridStage::Symbols, n_subcarriers, n_symbols, data)?;
    grid.stage = GridStage::Symbols;
    Ok(grid)
}

/// Hybrid precoding: per resource element `x = V_RF * V_BB * s`.
pub fn tx_precode(
    symbols: &SubframeGrid,
    v_rf: &AnalogBeamformer,
    v_bb: &CMatrix,
) -> Result<SubframeGrid> {
    if symbols.stage != GridStage::Symbols {
        return Err(Error::InvalidInput("tx_precode expects a symbols-stage grid".into()));
    }
    if v_bb.nrows() != v_rf.n_chains() || v_bb.ncols() != symbols.width() {
        return Err(Error::InvalidInput(format!(
            "precoder chain mismatch: V_RF is {}x{}, V_BB is {}x{}, grid width {}",
            v_rf.n_elements(),
            v_rf.n_chains(),
            v_bb.nrows(),
            v_bb.ncols(),
            symbols.width()
        )));
    }
    let precoder = linalg::mul(&v_rf.assembled, v_bb);
    let data = linalg::mul(&precoder, &symbols.data);
    let mut grid =
        SubframeGrid::from_data(GridStage::TxAntenna, symbols.n_subcarriers, symbols.n_symbols, data)?;
    grid.low_rank = Some(LowRank { left: precoder, right: symbols.data.clone() });
    Ok(grid)
}

/// Apply a channel matrix to every resource element of a grid, exploiting the
/// grid's low-rank factorization when present.
pub(crate) fn apply_channel(h: &CMatrix, grid: &SubframeGrid) -> CMatrix {
    match &grid.low_rank {
        Some(lr) => {
            let hl = linalg::mul(h, &lr.left);
            linalg::mul(&hl, &lr.right)
        }
        None => linalg::mul(h, &grid.data),
    }
}

/// Inner products `a^H x_{p,q}` for every resource element, as a vector over
/// columns.
pub(crate) fn adjoint_apply_to_grid(a: &CVector, grid: &SubframeGrid) -> CVector {
    match &grid.low_rank {
        Some(lr) => {
            // a^H (left right) = (left^H a)^H right
            let v = lr.left.ad_mul(a);
            let mut out = CVector::zeros(grid.data.ncols());
            for col in 0..lr.right.ncols() {
                out[col] = v.dotc(&lr.right.column(col).into_owned());
            }
            out
        }
        None => {
            let v = grid.data.ad_mul(a);
            CVector::from_fn(v.len(), |i, _| v[i].conj())
        }
    }
}

/// Add circularly-symmetric complex Gaussian noise of the given per-element
/// variance, one ChaCha substream per resource element.
fn add_noise(data: &mut CMatrix, variance: f64, seed: u64) -> Result<()> {
    if variance < 0.0 {
        return Err(Error::InvalidInput(format!("noise variance must be >= 0, got {variance}")));
    }
    if variance == 0.0 {
        return Ok(());
    }
    let scale = (variance / 2.0).sqrt();
    let base = ChaCha8Rng::seed_from_u64(seed);
    for col in 0..data.ncols() {
        let mut rng = base.clone();
        rng.set_stream(col as u64);
        for row in 0..data.nrows() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            data[(row, col)] += Complex64::new(scale * re, scale * im);
        }
    }
    Ok(())
}

/// Base-station receive path: per resource element
/// `y = (sum_k reflection_k e^{-j 2 pi delay_k p delta_f} a_M a_N^H) x + H_SI x + n`.
///
/// The full-duplex self-interference term uses `si.matrix` as is; pass a
/// zero matrix to model ideal (or half-duplex silent) operation.
pub fn radar_receive(
    tx_grid: &SubframeGrid,
    targets: &[TargetState],
    si: &SiChannel,
    delta_f: f64,
    tx_geom: &ArrayGeometry,
    rx_geom: &ArrayGeometry,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<SubframeGrid> {
    if tx_grid.stage != GridStage::TxAntenna {
        return Err(Error::InvalidInput("radar_receive expects a TX-antenna-stage grid".into()));
    }
    if si.matrix.ncols() != tx_grid.width() || si.matrix.ncols() != tx_geom.n_elements {
        return Err(Error::InvalidInput(format!(
            "SI channel is {}x{} but TX grid width is {}",
            si.matrix.nrows(),
            si.matrix.ncols(),
            tx_grid.width()
        )));
    }
    if si.matrix.nrows() != rx_geom.n_elements {
        return Err(Error::InvalidInput("SI channel rows disagree with RX geometry".into()));
    }
    let (p_count, q_count) = (tx_grid.n_subcarriers, tx_grid.n_symbols);
    let mut data = apply_channel(&si.matrix, tx_grid);

    let one = Complex64::new(1.0, 0.0);
    for t in targets {
        let a_rx = steering_vector(rx_geom, t.doa);
        let a_tx = steering_vector(tx_geom, t.doa);
        // Per-column scalars (a_tx^H x_{p,q}) and per-subcarrier delay phases.
        let projected = adjoint_apply_to_grid(&a_tx, tx_grid);
        for p in 0..p_count {
            let phase =
                t.reflection * Complex64::from_polar(1.0, -std::f64::consts::TAU * t.delay * p as f64 * delta_f);
            for q in 0..q_count {
                let col = p * q_count + q;
                let scale = phase * projected[col];
                data.column_mut(col).axpy(scale, &a_rx, one);
            }
        }
    }
    add_noise(&mut data, noise.variance_bs, seed)?;
    SubframeGrid::from_data(GridStage::RxAntenna, p_count, q_count, data)
}

/// Baseband combining with canceller injection: per resource element
/// `y_tilde = W_RF^H y + (C + D) V_BB s`.
///
/// The analog/digital cancellers `C`, `D` hold `-`(known SI) replicas, so
/// this equals the expanded form `W_RF^H (y - H_SI x) + (H_SI_eff + C + D) V_BB s`.
pub fn bb_combine(
    rx_grid: &SubframeGrid,
    w_rf: &AnalogBeamformer,
    analog_canceller: &CMatrix,
    digital_canceller: &CMatrix,
    v_bb: &CMatrix,
    symbols: &SubframeGrid,
) -> Result<SubframeGrid> {
    if rx_grid.stage != GridStage::RxAntenna {
        return Err(Error::InvalidInput("bb_combine expects an RX-antenna-stage grid".into()));
    }
    if symbols.stage != GridStage::Symbols || !rx_grid.same_shape_as(symbols) {
        return Err(Error::InvalidInput("combiner needs the matching symbols grid".into()));
    }
    let m_rf = w_rf.n_chains();
    if rx_grid.width() != w_rf.n_elements() {
        return Err(Error::InvalidInput("RX grid width disagrees with W_RF".into()));
    }
    if analog_canceller.nrows() != m_rf
        || digital_canceller.nrows() != m_rf
        || analog_canceller.ncols() != v_bb.nrows()
        || digital_canceller.ncols() != v_bb.nrows()
        || v_bb.ncols() != symbols.width()
    {
        return Err(Error::InvalidInput(format!(
            "canceller chain mismatch: C {}x{}, D {}x{}, V_BB {}x{}, {} streams",
            analog_canceller.nrows(),
            analog_canceller.ncols(),
            digital_canceller.nrows(),
            digital_canceller.ncols(),
            v_bb.nrows(),
            v_bb.ncols(),
            symbols.width()
        )));
    }
    let mut data = linalg::adjoint_mul(&w_rf.assembled, &rx_grid.data);
    let injected = linalg::mul(&(analog_canceller + digital_canceller), v_bb);
    linalg::mul_acc(&mut data, &injected, &symbols.data);
    SubframeGrid::from_data(GridStage::RxChain, rx_grid.n_subcarriers, rx_grid.n_symbols, data)
}

/// Downlink user receive path: per resource element `r = H_DL x + z`.
pub fn user_receive(
    tx_grid: &SubframeGrid,
    dl: &DlChannel,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<SubframeGrid> {
    if tx_grid.stage != GridStage::TxAntenna {
        return Err(Error::InvalidInput("user_receive expects a TX-antenna-stage grid".into()));
    }
    if dl.matrix.ncols() != tx_grid.width() {
        return Err(Error::InvalidInput("DL channel columns disagree with TX grid width".into()));
    }
    let mut data = apply_channel(&dl.matrix, tx_grid);
    add_noise(&mut data, noise.variance_user, seed)?;
    SubframeGrid::from_data(GridStage::UserRx, tx_grid.n_subcarriers, tx_grid.n_symbols, data)
}

/// Per-RX-chain RF saturation flags: chain `m` is compliant iff
/// `||row m of (H_SI_eff + C) V_BB||^2 <= rho_b` (mW).
pub fn check_saturation(h_si_eff_plus_c: &CMatrix, v_bb: &CMatrix, rho_b: f64) -> Vec<bool> {
    let analog_residual = linalg::mul(h_si_eff_plus_c, v_bb);
    linalg::row_powers(&analog_residual).into_iter().map(|p| p <= rho_b).collect()
}
