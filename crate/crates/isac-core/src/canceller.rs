//! Tap-limited analog and digital self-interference cancellers acting on the
//! effective `M_RF x N_RF` SI channel seen between RF chains, plus
//! residual-power accounting.
//!
//! The analog canceller models a budget of `n_taps` physical taps between TX
//! and RX chains: it cancels the `n_taps` largest-magnitude entries of the
//! effective channel exactly and leaves the rest untouched. The digital
//! canceller is unconstrained and removes whatever the analog stage left,
//! limited only by the accuracy of the channel estimate it is given.

use crate::linalg;
use crate::{CMatrix, Error, Result};

/// Analog + digital canceller pair with the analog tap budget they were
/// designed for.
#[derive(Debug, Clone)]
pub struct CancellerPair {
    /// Sparse analog canceller `C` (at most `n_taps` nonzero entries).
    pub analog: CMatrix,
    /// Digital canceller `D`.
    pub digital: CMatrix,
    /// Analog tap budget `N_C`.
    pub n_taps: usize,
}

impl CancellerPair {
    /// Number of active analog taps.
    pub fn analog_nonzeros(&self) -> usize {
        self.analog.iter().filter(|z| z.norm_sqr() > 0.0).count()
    }
}

/// Design the tap-limited analog canceller: `C` equals `-H_si_eff` on the
/// `n_taps` largest-magnitude entries (ties broken toward the lowest
/// column-major linear index) and is zero elsewhere. For this entrywise
/// family the greedy support is optimal: each tap independently removes its
/// entry's contribution from the residual Frobenius norm.
pub fn design_analog_canceller(h_si_eff: &CMatrix, n_taps: usize) -> Result<CMatrix> {
    let n_entries = h_si_eff.nrows() * h_si_eff.ncols();
    if n_taps > n_entries {
        return Err(Error::InvalidInput(format!(
            "tap budget {n_taps} exceeds the {n_entries} entries of the effective channel"
        )));
    }
    let mut order: Vec<usize> = (0..n_entries).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (h_si_eff[a].norm_sqr(), h_si_eff[b].norm_sqr());
        mb.partial_cmp(&ma).expect("entry magnitude comparison").then(a.cmp(&b))
    });
    let mut c = CMatrix::zeros(h_si_eff.nrows(), h_si_eff.ncols());
    for &idx in order.iter().take(n_taps) {
        c[idx] = -h_si_eff[idx];
    }
    Ok(c)
}

/// Digital canceller under the given channel estimate: `D = -(H_si_eff + C)`.
/// With a perfect estimate the baseband residual `H + C + D` is exactly zero;
/// estimation error propagates one-to-one into the residual.
pub fn design_digital_canceller(h_si_eff: &CMatrix, analog: &CMatrix) -> CMatrix {
    -(h_si_eff + analog)
}

/// Residual self-interference powers in mW: the total baseband residual
/// `||(H + C + D) V_BB||_F^2` and the per-RX-chain row powers of the
/// analog-stage residual `(H + C) V_BB` (the quantity the RF saturation
/// constraint is written on).
pub fn residual_si_power(
    h_si_eff: &CMatrix,
    analog: &CMatrix,
    digital: &CMatrix,
    v_bb: &CMatrix,
) -> (f64, Vec<f64>) {
    let baseband = linalg::mul(&(h_si_eff + analog + digital), v_bb);
    let analog_stage = linalg::mul(&(h_si_eff + analog), v_bb);
    (baseband.norm_squared(), linalg::row_powers(&analog_stage))
}
