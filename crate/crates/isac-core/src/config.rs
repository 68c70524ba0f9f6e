//! Scenario configuration: the full parameter set of a tracking run,
//! loadable from TOML with strict (unknown-key-rejecting) parsing.
//!
//! Array sizes are specified per RF chain (`*_rf_chains` x `*_subarray_size`);
//! the full aperture sizes are derived, so the partially-connected structure
//! holds by construction. Powers are configured in dBm and converted to mW
//! internally; angles are configured in degrees and converted to radians.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::{dft_codebook, ArrayGeometry, BeamCodebook};
use crate::channel::SPEED_OF_LIGHT;
use crate::{Error, Result};

/// Duplexing / baseline mode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full-duplex operation: data and sensing share every symbol, with the
    /// self-interference channel live.
    FdIsac,
    /// Half-duplex baseline: the subframe splits into a data part and a
    /// sensing part, so there is no self-interference but the downlink rate
    /// scales by the data time fraction.
    HdIsac,
    /// Full-duplex upper bound with the self-interference channel forced to
    /// zero.
    IdealFd,
}

/// How target reflection magnitudes are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionModel {
    /// Two-way free-space radar equation:
    /// `|alpha|^2 = reflection_gain * lambda^2 / ((4 pi)^3 range^4)`.
    RadarEquation,
    /// Constant magnitude `|alpha| = reflection_gain` regardless of range.
    Fixed,
}

/// Complete description of one simulation scenario. Defaults reproduce the
/// reference deployment: a 128x128 full-duplex node at 28 GHz with 8 chains
/// per side, two 2-stream users, and four tracked targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Carrier frequency in Hz.
    pub carrier_frequency_hz: f64,
    /// OFDM subcarrier spacing in Hz.
    pub subcarrier_spacing_hz: f64,
    /// Occupied subcarriers per symbol (P).
    pub n_subcarriers: usize,
    /// OFDM symbols per subframe (Q).
    pub n_symbols: usize,
    /// Subframe duration in seconds, used by target evolution.
    pub subframe_duration_s: f64,
    /// TX RF chains (N_RF).
    pub n_tx_rf_chains: usize,
    /// RX RF chains (M_RF).
    pub n_rx_rf_chains: usize,
    /// TX antennas per chain (N_A); N = N_RF * N_A.
    pub tx_subarray_size: usize,
    /// RX antennas per chain (M_A); M = M_RF * M_A.
    pub rx_subarray_size: usize,
    /// Downlink users (U), served by reflections off the first U targets.
    pub n_users: usize,
    /// Streams per user (L), also the user array size.
    pub n_streams_per_user: usize,
    /// Radar targets (K).
    pub n_targets: usize,
    /// Codebook resolution: 2^bits beams per subarray.
    pub codebook_bits: u32,
    /// Analog canceller tap budget (N_C) out of N_RF * M_RF entries.
    pub n_canceller_taps: usize,
    /// Transmit power budget in dBm.
    pub tx_power_dbm: f64,
    /// Per-chain noise power in dBm (BS sensing receiver and user devices).
    pub noise_power_dbm: f64,
    /// Per-chain RX saturation level in dBm (rho_b).
    pub saturation_dbm: f64,
    /// TX/RX array separation in meters for the self-interference geometry.
    pub tx_rx_separation_m: f64,
    /// Downlink pathloss in dB applied to each user channel magnitude.
    /// Like the reflectivity constant, this is an *effective* loss under the
    /// unit-norm steering convention: free-space loss minus the TX/user
    /// array factors. 28 GHz at tens of meters is roughly 100 dB free-space;
    /// 128 BS elements and 2 user elements give back about 24 dB.
    pub dl_pathloss_db: f64,
    /// Angular deployment sector, degrees.
    pub sector_min_deg: f64,
    /// Angular deployment sector, degrees.
    pub sector_max_deg: f64,
    /// Smallest target placement range in meters.
    pub min_range_m: f64,
    /// Largest target placement range in meters.
    pub max_range_m: f64,
    /// Minimum angular spacing between placed targets, degrees.
    pub min_target_separation_deg: f64,
    /// Subframes per run.
    pub n_subframes: usize,
    /// Target speed in m/s; per-target DoA steps follow from each range.
    /// Mutually exclusive with `doa_step_deg`.
    pub velocity_mps: Option<f64>,
    /// Fixed per-subframe DoA step in degrees for every target. Mutually
    /// exclusive with `velocity_mps`; 0.1 degrees when neither is set.
    pub doa_step_deg: Option<f64>,
    /// Reflection magnitude model.
    pub reflection_model: ReflectionModel,
    /// Reflectivity constant of the model (see [`ReflectionModel`]). Under
    /// the radar equation this constant carries the target cross-section
    /// *and* the TX/RX element and array factors that the unit-norm steering
    /// convention leaves out of the channel itself; with 128-element arrays
    /// a car-sized target works out to around 1e6.
    pub reflection_gain: f64,
    /// Fraction of the subframe carrying downlink data in `hd_isac` mode.
    pub hd_dl_fraction: f64,
    /// Subframe-0 prior quality: true DoAs perturbed uniformly within
    /// plus/minus this bound, degrees.
    pub initial_prior_error_deg: f64,
    /// DoA search grid step in degrees.
    pub doa_grid_step_deg: f64,
    /// Duplexing mode.
    pub mode: Mode,
    /// Master seed; all randomness in a run derives from it.
    pub seed: u64,
    /// Optional self-interference knowledge error: the channel estimate used
    /// for cancellation is the true channel plus a random perturbation this
    /// many dB below it in Frobenius norm (e.g. -40.0). `None` models
    /// perfect knowledge.
    pub si_knowledge_error_db: Option<f64>,
    /// Passive TX/RX front-end isolation in dB (power). The geometric SI
    /// channel is normalized to `||H_SI||_F^2 = M*N`, which fixes only its
    /// spatial structure; this knob sets the absolute coupling level the
    /// receiver actually sees. 0 disables isolation.
    pub si_isolation_db: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            carrier_frequency_hz: 28e9,
            subcarrier_spacing_hz: 120e3,
            n_subcarriers: 792,
            n_symbols: 14,
            subframe_duration_s: 1e-3,
            n_tx_rf_chains: 8,
            n_rx_rf_chains: 8,
            tx_subarray_size: 16,
            rx_subarray_size: 16,
            n_users: 2,
            n_streams_per_user: 2,
            n_targets: 4,
            codebook_bits: 5,
            n_canceller_taps: 16,
            tx_power_dbm: 30.0,
            noise_power_dbm: -90.0,
            saturation_dbm: -30.0,
            tx_rx_separation_m: 5e-3,
            dl_pathloss_db: 76.0,
            sector_min_deg: -60.0,
            sector_max_deg: 60.0,
            min_range_m: 10.0,
            max_range_m: 80.0,
            min_target_separation_deg: 2.0,
            n_subframes: 20,
            velocity_mps: None,
            doa_step_deg: None,
            reflection_model: ReflectionModel::RadarEquation,
            reflection_gain: 1e6,
            hd_dl_fraction: 0.5,
            initial_prior_error_deg: 1.0,
            doa_grid_step_deg: 0.01,
            mode: Mode::FdIsac,
            seed: 0,
            si_knowledge_error_db: None,
            si_isolation_db: 40.0,
        }
    }
}

/// Per-subframe DoA evolution resolved from the config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Evolution {
    /// Constant tangential speed in m/s; step depends on each target range.
    Velocity(f64),
    /// Fixed step in radians applied to every target.
    FixedStep(f64),
}

impl ScenarioConfig {
    /// Parses a TOML string (unknown keys rejected) and validates it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads and validates a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Checks every structural invariant; all other accessors assume this
    /// passed.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.carrier_frequency_hz <= 0.0 || self.subcarrier_spacing_hz <= 0.0 {
            return fail("carrier frequency and subcarrier spacing must be positive".into());
        }
        if self.n_subcarriers == 0 || self.n_symbols == 0 {
            return fail("grid dimensions must be nonzero".into());
        }
        if self.subframe_duration_s <= 0.0 {
            return fail("subframe duration must be positive".into());
        }
        if self.n_tx_rf_chains == 0
            || self.n_rx_rf_chains == 0
            || self.tx_subarray_size == 0
            || self.rx_subarray_size == 0
        {
            return fail("chain and subarray counts must be nonzero".into());
        }
        if self.n_users == 0 || self.n_streams_per_user == 0 {
            return fail("user and stream counts must be nonzero".into());
        }
        if self.n_users * self.n_streams_per_user > self.n_tx_rf_chains {
            return fail(format!(
                "{} users x {} streams exceed {} TX chains",
                self.n_users, self.n_streams_per_user, self.n_tx_rf_chains
            ));
        }
        if self.n_targets == 0 {
            return fail("at least one target is required".into());
        }
        if self.n_targets >= self.n_rx_rf_chains {
            return fail(format!(
                "{} targets need more than {} RX chains for a noise subspace",
                self.n_targets, self.n_rx_rf_chains
            ));
        }
        if self.n_users > self.n_targets {
            return fail(format!(
                "{} users need {} downlink scatterers but only {} targets exist",
                self.n_users, self.n_users, self.n_targets
            ));
        }
        if self.codebook_bits == 0 || self.codebook_bits > 16 {
            return fail(format!("codebook bits must be in 1..=16, got {}", self.codebook_bits));
        }
        if self.n_canceller_taps > self.n_tx_rf_chains * self.n_rx_rf_chains {
            return fail(format!(
                "{} taps exceed the {}x{} canceller",
                self.n_canceller_taps, self.n_rx_rf_chains, self.n_tx_rf_chains
            ));
        }
        if self.tx_rx_separation_m <= 0.0 {
            return fail("TX/RX separation must be positive".into());
        }
        if !(self.sector_min_deg < self.sector_max_deg)
            || self.sector_min_deg < -90.0
            || self.sector_max_deg > 90.0
        {
            return fail(format!(
                "sector [{}, {}] degrees is not a valid sub-range of (-90, 90)",
                self.sector_min_deg, self.sector_max_deg
            ));
        }
        if !(self.min_range_m > 0.0) || !(self.min_range_m <= self.max_range_m) {
            return fail(format!(
                "range interval [{}, {}] m is invalid",
                self.min_range_m, self.max_range_m
            ));
        }
        if self.min_target_separation_deg < 0.0
            || (self.n_targets as f64 - 1.0) * self.min_target_separation_deg
                >= 0.8 * (self.sector_max_deg - self.sector_min_deg)
        {
            return fail("targets cannot fit in the sector at the configured separation".into());
        }
        if self.n_subframes == 0 {
            return fail("at least one subframe is required".into());
        }
        if self.velocity_mps.is_some() && self.doa_step_deg.is_some() {
            return fail("velocity_mps and doa_step_deg are mutually exclusive".into());
        }
        if self.reflection_gain <= 0.0 {
            return fail("reflection gain must be positive".into());
        }
        if !(self.hd_dl_fraction > 0.0 && self.hd_dl_fraction < 1.0) {
            return fail(format!(
                "hd_dl_fraction must lie strictly between 0 and 1, got {}",
                self.hd_dl_fraction
            ));
        }
        if self.mode == Mode::HdIsac && self.n_symbols < 2 {
            return fail("half-duplex mode needs at least two symbols to split".into());
        }
        if self.initial_prior_error_deg < 0.0 {
            return fail("initial prior error bound must be nonnegative".into());
        }
        if !(self.doa_grid_step_deg > 0.0) {
            return fail("DoA grid step must be positive".into());
        }
        if !self.si_isolation_db.is_finite() || self.si_isolation_db < 0.0 {
            return fail(format!(
                "SI isolation must be a nonnegative finite dB value, got {}",
                self.si_isolation_db
            ));
        }
        Ok(())
    }

    /// Carrier wavelength in meters.
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency_hz
    }

    /// Total TX antennas N = N_RF * N_A.
    pub fn n_tx_antennas(&self) -> usize {
        self.n_tx_rf_chains * self.tx_subarray_size
    }

    /// Total RX antennas M = M_RF * M_A.
    pub fn n_rx_antennas(&self) -> usize {
        self.n_rx_rf_chains * self.rx_subarray_size
    }

    pub fn tx_geometry(&self) -> ArrayGeometry {
        ArrayGeometry::half_wavelength(self.n_tx_antennas(), self.wavelength())
    }

    pub fn rx_geometry(&self) -> ArrayGeometry {
        ArrayGeometry::half_wavelength(self.n_rx_antennas(), self.wavelength())
    }

    /// Each user carries one antenna per stream.
    pub fn user_geometry(&self) -> ArrayGeometry {
        ArrayGeometry::half_wavelength(self.n_streams_per_user, self.wavelength())
    }

    pub fn tx_codebook(&self) -> BeamCodebook {
        dft_codebook(self.codebook_bits, self.tx_subarray_size)
    }

    pub fn rx_codebook(&self) -> BeamCodebook {
        dft_codebook(self.codebook_bits, self.rx_subarray_size)
    }

    /// Transmit power budget in mW.
    pub fn tx_power_mw(&self) -> f64 {
        10f64.powf(self.tx_power_dbm / 10.0)
    }

    /// Noise variance in mW (shared by the sensing chains and the users).
    pub fn noise_power_mw(&self) -> f64 {
        10f64.powf(self.noise_power_dbm / 10.0)
    }

    /// Saturation level rho_b in mW.
    pub fn saturation_mw(&self) -> f64 {
        10f64.powf(self.saturation_dbm / 10.0)
    }

    /// Amplitude factor the front-end isolation applies to the normalized
    /// SI coupling, `10^(-si_isolation_db / 20)`.
    pub fn si_isolation_amplitude(&self) -> f64 {
        10f64.powf(-self.si_isolation_db / 20.0)
    }

    /// Deployment sector in radians.
    pub fn sector_rad(&self) -> (f64, f64) {
        (self.sector_min_deg.to_radians(), self.sector_max_deg.to_radians())
    }

    /// DoA search grid step in radians.
    pub fn doa_grid_step_rad(&self) -> f64 {
        self.doa_grid_step_deg.to_radians()
    }

    /// Resolved evolution model (0.1 degrees/subframe when nothing is set).
    pub fn evolution(&self) -> Evolution {
        match (self.velocity_mps, self.doa_step_deg) {
            (Some(v), None) => Evolution::Velocity(v),
            (None, Some(s)) => Evolution::FixedStep(s.to_radians()),
            (None, None) => Evolution::FixedStep(0.1f64.to_radians()),
            (Some(_), Some(_)) => unreachable!("rejected by validate"),
        }
    }

    /// Range quantization step c / (2 P delta_f) in meters.
    pub fn range_bin_m(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.n_subcarriers as f64 * self.subcarrier_spacing_hz)
    }

    /// Symbols carrying downlink data (all of them outside `hd_isac`).
    pub fn dl_symbols(&self) -> usize {
        match self.mode {
            Mode::HdIsac => {
                let dl = (self.n_symbols as f64 * self.hd_dl_fraction).round() as usize;
                dl.clamp(1, self.n_symbols - 1)
            }
            _ => self.n_symbols,
        }
    }

    /// Symbols the sensing receiver integrates over.
    pub fn sensing_symbols(&self) -> usize {
        match self.mode {
            Mode::HdIsac => self.n_symbols - self.dl_symbols(),
            _ => self.n_symbols,
        }
    }

    /// Fraction of the subframe producing downlink rate: the realized symbol
    /// split `dl_symbols / n_symbols` (not the raw `hd_dl_fraction` knob,
    /// which the symbol count rounds).
    pub fn dl_time_fraction(&self) -> f64 {
        match self.mode {
            Mode::HdIsac => self.dl_symbols() as f64 / self.n_symbols as f64,
            _ => 1.0,
        }
    }
}
